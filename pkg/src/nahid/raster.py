"""Core image types, codecs and quarter-turn rotation.

Images are thin immutable wrappers around numpy arrays stored row-major
(``data[row, col]``).  Three pixel formats exist:

* :class:`GrayImage`  — 8-bit intensities, the camera frame format.
* :class:`LabelImage` — per-pixel class ids below ``num_classes``.
* :class:`ProbMap`    — per-pixel, per-class float32 probabilities
  (class-innermost).  ``num_classes == 1`` means binary/sigmoid semantics.

File formats: binary PGM (P5), 8-bit grayscale PNG, and the ``.pmap``
probability container (see :func:`encode_pmap`).  All codecs are exact
round trips on valid data.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import InvariantViolation, MalformedFile, SizeMismatch

PROB_SUM_TOL = 1e-5


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale image, shape (height, width)."""

    width: int
    height: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvariantViolation("image dimensions must be >= 1")
        if self.data.shape != (self.height, self.width):
            raise InvariantViolation(
                f"data shape {self.data.shape} does not match {self.height}x{self.width}"
            )
        if self.data.dtype != np.uint8:
            raise InvariantViolation("GrayImage data must be uint8")
        _freeze(self.data)

    @classmethod
    def from_array(cls, arr) -> "GrayImage":
        a = np.asarray(arr, dtype=np.uint8)
        if a.ndim != 2:
            raise InvariantViolation("expected a 2-D array")
        return cls(width=a.shape[1], height=a.shape[0], data=a.copy())

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class LabelImage:
    """Per-pixel class ids, each below ``num_classes``."""

    width: int
    height: int
    data: np.ndarray = field(repr=False)
    num_classes: int = 2

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvariantViolation("num_classes must be >= 2")
        if self.width < 1 or self.height < 1:
            raise InvariantViolation("image dimensions must be >= 1")
        if self.data.shape != (self.height, self.width):
            raise InvariantViolation(
                f"data shape {self.data.shape} does not match {self.height}x{self.width}"
            )
        if self.data.min() < 0 or self.data.max() >= self.num_classes:
            raise InvariantViolation("class id outside [0, num_classes)")
        _freeze(self.data)

    @classmethod
    def from_array(cls, arr, num_classes: int) -> "LabelImage":
        a = np.ascontiguousarray(arr, dtype=np.int32)
        if a.ndim != 2:
            raise InvariantViolation("expected a 2-D array")
        return cls(width=a.shape[1], height=a.shape[0], data=a.copy(), num_classes=num_classes)

    def __eq__(self, other):
        if not isinstance(other, LabelImage):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.num_classes == other.num_classes
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class probabilities, shape (height, width, num_classes).

    Multi-class maps must have pixel vectors summing to 1 within
    ``PROB_SUM_TOL``; a single-channel map carries sigmoid semantics and
    only the [0, 1] range is enforced.
    """

    width: int
    height: int
    num_classes: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.num_classes < 1:
            raise InvariantViolation("num_classes must be >= 1")
        if self.width < 1 or self.height < 1:
            raise InvariantViolation("map dimensions must be >= 1")
        if self.data.shape != (self.height, self.width, self.num_classes):
            raise InvariantViolation(
                f"data shape {self.data.shape} does not match "
                f"{self.height}x{self.width}x{self.num_classes}"
            )
        if self.data.dtype != np.float32:
            raise InvariantViolation("ProbMap data must be float32")
        valid = (self.data >= 0.0) & (self.data <= 1.0)
        if not bool(valid.all()):
            raise InvariantViolation("probabilities outside [0, 1]")
        if self.num_classes > 1:
            sums = self.data.astype(np.float64).sum(axis=2)
            if not bool((np.abs(sums - 1.0) <= PROB_SUM_TOL).all()):
                raise InvariantViolation("pixel class vector does not sum to 1")
        _freeze(self.data)

    @classmethod
    def from_array(cls, arr) -> "ProbMap":
        a = np.ascontiguousarray(arr, dtype=np.float32)
        if a.ndim != 3:
            raise InvariantViolation("expected a 3-D array")
        return cls(width=a.shape[1], height=a.shape[0], num_classes=a.shape[2], data=a.copy())

    def __eq__(self, other):
        if not isinstance(other, ProbMap):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.num_classes == other.num_classes
            and np.array_equal(self.data, other.data)
        )


def one_hot(labels: LabelImage) -> ProbMap:
    """Exact one-hot probability map of a label image."""
    eye = np.eye(labels.num_classes, dtype=np.float32)
    return ProbMap.from_array(eye[labels.data])


def argmax_labels(probs: ProbMap, binary_threshold: float = 0.5) -> LabelImage:
    """Per-pixel winning class.

    Single-channel maps threshold at ``binary_threshold`` and yield the
    two effective classes {0: background, 1: foreground}.
    """
    if probs.num_classes == 1:
        data = (probs.data[:, :, 0] >= binary_threshold).astype(np.int32)
        return LabelImage.from_array(data, num_classes=2)
    return LabelImage.from_array(
        np.argmax(probs.data, axis=2).astype(np.int32), num_classes=probs.num_classes
    )


@dataclass(frozen=True)
class Rotation:
    """Quarter-turn rotation; ``quarter_turns`` clockwise turns in {0,1,2,3}."""

    quarter_turns: int

    def __post_init__(self):
        if self.quarter_turns not in (0, 1, 2, 3):
            raise InvariantViolation("quarter_turns must be in {0, 1, 2, 3}")


def rotate_quarter(img, r):
    """Rotate a GrayImage, LabelImage or ProbMap by quarter turns clockwise.

    Dimensions swap for odd turn counts; ProbMap class channels are
    untouched.  ``r`` may be a :class:`Rotation` or a plain int.
    """
    turns = r.quarter_turns if isinstance(r, Rotation) else Rotation(int(r) % 4).quarter_turns
    if turns == 0:
        return img
    if isinstance(img, GrayImage):
        return GrayImage.from_array(np.rot90(img.data, k=-turns))
    if isinstance(img, LabelImage):
        return LabelImage.from_array(np.rot90(img.data, k=-turns), num_classes=img.num_classes)
    if isinstance(img, ProbMap):
        return ProbMap.from_array(np.rot90(img.data, k=-turns, axes=(0, 1)))
    raise TypeError(f"cannot rotate {type(img).__name__}")


# ---------------------------------------------------------------------------
# Image codecs (PGM P5 and 8-bit grayscale PNG)
# ---------------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"^\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pgm_tokens(buf: bytes, start: int, count: int):
    """Read whitespace-separated header tokens, skipping # comments."""
    tokens = []
    pos = start
    while len(tokens) < count:
        m = _PGM_TOKEN.match(buf[pos:])
        if not m:
            raise MalformedFile("truncated PGM header")
        tokens.append(m.group(1))
        pos += m.end(1)
    return tokens, pos


def decode_pgm(data: bytes) -> GrayImage:
    if not data.startswith(b"P5"):
        raise MalformedFile("not a binary PGM (missing P5 magic)")
    try:
        tokens, pos = _read_pgm_tokens(data, 2, 3)
        width, height, maxval = (int(t) for t in tokens)
    except (ValueError, MalformedFile) as exc:
        raise MalformedFile(f"bad PGM header: {exc}") from exc
    if width < 1 or height < 1:
        raise MalformedFile("non-positive PGM dimensions")
    if not 0 < maxval <= 255:
        raise MalformedFile(f"unsupported PGM maxval {maxval} (8-bit only)")
    # exactly one whitespace byte separates the header from the payload
    if data[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise MalformedFile("missing whitespace after PGM maxval")
    payload = data[pos + 1:]
    if len(payload) != width * height:
        raise MalformedFile(
            f"PGM payload length {len(payload)} != {width}x{height}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return GrayImage(width=width, height=height, data=arr.copy())


def encode_pgm(img: GrayImage) -> bytes:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.data.tobytes()


def decode_image(data: bytes) -> GrayImage:
    """Decode PGM (P5) or 8-bit grayscale PNG bytes.

    Pixel values are returned exactly as stored; color PNG inputs are
    reduced to luminance before entering the pipeline.
    """
    if len(data) == 0:
        raise MalformedFile("empty byte stream")
    if data.startswith(b"P5"):
        return decode_pgm(data)
    if not data.startswith(b"\x89PNG\r\n\x1a\n"):
        raise MalformedFile("expected a P5 PGM or PNG stream")
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode != "L":
                im = im.convert("L")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise MalformedFile(f"not a decodable PGM/PNG stream: {exc}") from exc
    if arr.ndim != 2:
        raise MalformedFile("image did not decode to a single channel")
    return GrayImage.from_array(arr)


def encode_image(img: GrayImage, fmt: str = "pgm") -> bytes:
    """Encode to ``pgm`` (default) or lossless grayscale ``png``."""
    if fmt == "pgm":
        return encode_pgm(img)
    if fmt == "png":
        out = io.BytesIO()
        Image.fromarray(img.data, mode="L").save(out, format="PNG")
        return out.getvalue()
    raise ValueError(f"unknown image format {fmt!r}")


# ---------------------------------------------------------------------------
# ProbMap codec (.pmap)
# ---------------------------------------------------------------------------
#
# Layout: ASCII line "PMAP1", ASCII line "<width> <height> <num_classes>",
# then width*height*num_classes IEEE-754 float32 little-endian values,
# row-major with the class index innermost.  No padding.

PMAP_MAGIC = b"PMAP1"


def encode_pmap(p: ProbMap) -> bytes:
    header = PMAP_MAGIC + b"\n" + f"{p.width} {p.height} {p.num_classes}\n".encode("ascii")
    return header + p.data.astype("<f4", copy=False).tobytes()


def decode_pmap(data: bytes) -> ProbMap:
    nl1 = data.find(b"\n")
    if nl1 < 0 or data[:nl1] != PMAP_MAGIC:
        raise MalformedFile("missing PMAP1 magic")
    nl2 = data.find(b"\n", nl1 + 1)
    if nl2 < 0:
        raise MalformedFile("truncated pmap header")
    try:
        width, height, num_classes = (int(t) for t in data[nl1 + 1:nl2].split())
    except ValueError as exc:
        raise MalformedFile("bad pmap dimension line") from exc
    if width < 1 or height < 1 or num_classes < 1:
        raise MalformedFile("non-positive pmap dimensions")
    payload = data[nl2 + 1:]
    expected = width * height * num_classes * 4
    if len(payload) != expected:
        raise MalformedFile(f"pmap payload length {len(payload)} != {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(height, width, num_classes)
    finite = np.isfinite(arr) & (arr >= 0.0) & (arr <= 1.0)
    if not bool(finite.all()):
        raise InvariantViolation("pmap probabilities outside [0, 1]")
    return ProbMap(width=width, height=height, num_classes=num_classes, data=arr.copy())


def require_same_size(a, b, what: str = "inputs"):
    """Raise SizeMismatch naming both dimension pairs."""
    if a.width != b.width or a.height != b.height:
        raise SizeMismatch(
            f"{what} differ in size: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
