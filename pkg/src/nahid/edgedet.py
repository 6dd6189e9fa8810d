"""Boundary detection: Sobel gradient plus hysteresis thresholding.

The detector is deliberately simple and fully deterministic: an optional
box pre-blur, a 3x3 Sobel pass with L1 magnitude (|Gx| + |Gy|, range
0..1020 for 8-bit input), then two-threshold hysteresis with 8-connected
linking.  Rows may be processed in parallel; the output is identical to
serial execution because every pixel is a pure function of its
neighbourhood and linking is resolved by connected components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ImageTooSmall, InvalidConfig, InvariantViolation
from .raster import GrayImage
from ._parallel import map_row_bands

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class EdgeDetectorConfig:
    """Thresholds on the L1 Sobel magnitude plus optional box pre-blur.

    Defaults were desk-tuned on synthetic phantom scenes; override them
    from a config file or the CLI for other material.
    """

    low_threshold: float = 40.0
    high_threshold: float = 100.0
    blur_radius: int = 1

    def __post_init__(self):
        if self.low_threshold < 0:
            raise InvalidConfig("low_threshold must be >= 0")
        if self.high_threshold < self.low_threshold:
            raise InvalidConfig("high_threshold must be >= low_threshold")
        if self.blur_radius < 0:
            raise InvalidConfig("blur_radius must be >= 0")


@dataclass(frozen=True)
class EdgeMap:
    """Boolean edge mask matching the source image dimensions."""

    width: int
    height: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.data.shape != (self.height, self.width):
            raise InvariantViolation("edge mask shape does not match dimensions")
        if self.data.dtype != np.bool_:
            raise InvariantViolation("edge mask must be boolean")
        self.data.setflags(write=False)

    @classmethod
    def from_array(cls, arr) -> "EdgeMap":
        a = np.ascontiguousarray(arr, dtype=bool)
        return cls(width=a.shape[1], height=a.shape[0], data=a.copy())

    def to_gray(self) -> GrayImage:
        """0 = non-edge, 255 = edge (the PGM serialization)."""
        return GrayImage.from_array(np.where(self.data, 255, 0).astype(np.uint8))

    def __eq__(self, other):
        if not isinstance(other, EdgeMap):
            return NotImplemented
        return np.array_equal(self.data, other.data)


def _box_blur(field32: np.ndarray, radius: int) -> np.ndarray:
    """Mean filter with edge replication, fixed summation order.

    Written as explicit shifted adds so the result is bit-identical no
    matter how rows are chunked across workers.
    """
    if radius == 0:
        return field32
    k = 2 * radius + 1
    padded = np.pad(field32, radius, mode="edge")
    acc = np.zeros_like(field32, dtype=np.float32)
    h, w = field32.shape
    for dy in range(k):
        for dx in range(k):
            acc += padded[dy:dy + h, dx:dx + w]
    return acc * np.float32(1.0 / (k * k))


def _sobel_l1(field32: np.ndarray) -> np.ndarray:
    padded = np.pad(field32, 1, mode="edge")
    h, w = field32.shape

    def win(dy, dx):
        return padded[dy + 1:dy + 1 + h, dx + 1:dx + 1 + w]

    gx = (
        (win(-1, 1) - win(-1, -1))
        + np.float32(2.0) * (win(0, 1) - win(0, -1))
        + (win(1, 1) - win(1, -1))
    )
    gy = (
        (win(1, -1) - win(-1, -1))
        + np.float32(2.0) * (win(1, 0) - win(-1, 0))
        + (win(1, 1) - win(-1, 1))
    )
    return np.abs(gx) + np.abs(gy)


def gradient_magnitude(img: GrayImage, workers: int = 1) -> np.ndarray:
    """L1 Sobel magnitude with edge-replication padding.

    Returns a float32 field of shape (height, width).  Requires at least
    a 3x3 image.
    """
    if img.width < 3 or img.height < 3:
        raise ImageTooSmall(f"need at least 3x3, got {img.width}x{img.height}")
    field32 = img.data.astype(np.float32)
    return map_row_bands(_sobel_l1, field32, halo=1, workers=workers)


def detect_edges(img: GrayImage, cfg: EdgeDetectorConfig | None = None,
                 workers: int = 1) -> EdgeMap:
    """Hysteresis edge detection.

    Pixels at or above ``high_threshold`` are edges; pixels at or above
    ``low_threshold`` become edges when 8-connected (transitively through
    other weak pixels) to a strong pixel.  Deterministic regardless of
    traversal or worker count.
    """
    if cfg is None:
        cfg = EdgeDetectorConfig()
    if cfg.high_threshold < cfg.low_threshold:
        raise InvalidConfig("high_threshold must be >= low_threshold")
    if img.width < 3 or img.height < 3:
        raise ImageTooSmall(f"need at least 3x3, got {img.width}x{img.height}")

    field32 = img.data.astype(np.float32)
    if cfg.blur_radius > 0:
        r = cfg.blur_radius
        field32 = map_row_bands(lambda a: _box_blur(a, r), field32, halo=r, workers=workers)
    mag = map_row_bands(_sobel_l1, field32, halo=1, workers=workers)

    strong = mag >= cfg.high_threshold
    weak = mag >= cfg.low_threshold
    if not strong.any():
        return EdgeMap.from_array(np.zeros_like(strong))
    labels, n = ndimage.label(weak, structure=_EIGHT)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return EdgeMap.from_array(keep[labels])
