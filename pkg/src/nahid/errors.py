"""Exception types shared across the package.

Every domain failure raises a subclass of :class:`NahidError` so callers
(and the CLI) can separate expected failures from bugs.
"""


class NahidError(Exception):
    """Base class for all domain errors."""


class MalformedFile(NahidError):
    """A file or byte stream does not conform to its declared format."""


class InvariantViolation(NahidError):
    """Decoded or constructed data breaks a documented invariant."""


class SizeMismatch(NahidError):
    """Two inputs that must share dimensions do not."""


class ImageTooSmall(NahidError):
    """Image is below the minimum size an operation supports."""


class InvalidConfig(NahidError):
    """Configuration values are inconsistent or out of range."""


class ModelNotFound(NahidError):
    """No inference backend is registered for the requested situation."""


class MissingPrecomputedMap(NahidError):
    """A file-backed backend has no stored map for the given frame."""


class BackendProcessFailure(NahidError):
    """An external inference process failed or produced unusable output."""


class NodeNotFound(NahidError):
    """Referenced node id does not exist in the tree."""


class EdgeNotFound(NahidError):
    """Referenced edge does not exist in the tree."""


class InvalidFraction(NahidError):
    """Interpolation fraction outside the open interval (0, 1)."""


class OutOfBounds(NahidError):
    """Query point lies outside the model's bounding box."""


class InfeasibleSpec(NahidError):
    """A scene specification cannot be satisfied (e.g. too many regions)."""
