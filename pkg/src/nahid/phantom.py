"""Synthetic phantom scenes, segmentation noise and evaluation metrics.

Scenes are seeded Voronoi partitions of organ cells, each rendered at a
flat per-class intensity plus a tiny texture, so true class boundaries
stay crisp and an edge detector can recover them exactly.  An optional
elliptical lesion is embedded well inside the largest cell (the "ovary"
host).  Everything regenerates bit-identically from (spec, seed).

The corruption op models an imperfect segmentation output: starting from
the exact one-hot map, eligible pixels flip their winning class with
probability p, with the flipped winner encoded at 0.6 and the remaining
0.4 spread evenly over the other classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .edgedet import EdgeMap
from .errors import InfeasibleSpec, InvalidConfig, MalformedFile, SizeMismatch
from .raster import (
    GrayImage,
    LabelImage,
    ProbMap,
    decode_image,
    encode_pgm,
    one_hot,
    rotate_quarter,
)

MIN_REGION_PIXELS = 100
_EIGHT = np.ones((3, 3), dtype=bool)
_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

LESION_CLASS_NAME = "endometrioma"
HOST_CLASS_NAME = "ovary"


def _stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), stream]))


@dataclass(frozen=True)
class NoiseSpec:
    """Label-flip noise: everywhere (iid_flip) or only near class
    boundaries (boundary_band, within ``band`` pixels)."""

    mode: str = "iid_flip"
    p: float = 0.1
    band: int = 1

    def __post_init__(self):
        if self.mode not in ("iid_flip", "boundary_band"):
            raise InvalidConfig(f"unknown noise mode {self.mode!r}")
        if not 0.0 <= self.p <= 1.0:
            raise InvalidConfig("flip probability must be in [0, 1]")
        if self.mode == "boundary_band" and self.band < 1:
            raise InvalidConfig("boundary band must be >= 1 pixel")

    def to_dict(self) -> dict:
        d = {"mode": self.mode, "p": self.p}
        if self.mode == "boundary_band":
            d["band"] = self.band
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(**d)


@dataclass(frozen=True)
class SceneSpec:
    size: int
    num_regions: int
    lesion: bool
    seed: int
    lesion_area: int | None = None

    def __post_init__(self):
        if self.size < 16:
            raise InvalidConfig("scene size must be >= 16")
        if not 2 <= self.num_regions <= 6:
            raise InvalidConfig("num_regions must be in [2, 6]")
        if self.lesion_area is not None and self.lesion_area < 9:
            raise InvalidConfig("lesion_area must be >= 9 (one full blob block)")

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "num_regions": self.num_regions,
            "lesion": self.lesion,
            "seed": self.seed,
            "lesion_area": self.lesion_area,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass(frozen=True)
class PhantomScene:
    truth: LabelImage
    frame: GrayImage
    lesion_class: int
    seed: int
    spec: SceneSpec
    class_names: tuple
    host_class: int


def class_intensities(num_classes: int) -> np.ndarray:
    """Flat rendering intensity per class, evenly spread over [30, 225]."""
    return np.rint(np.linspace(30.0, 225.0, num=num_classes)).astype(np.int16)


def render_frame(truth: LabelImage, seed: int) -> GrayImage:
    """Render a frame from a label image: per-class intensity plus a
    seeded {-1,0,+1} texture.  Depends on the truth only through the
    class ids, so re-rendering after in-place scene edits stays aligned
    with the original texture."""
    levels = class_intensities(truth.num_classes)
    texture = _stream(seed, 2).integers(-1, 2, size=truth.data.shape).astype(np.int16)
    frame = np.clip(levels[truth.data] + texture, 0, 255).astype(np.uint8)
    return GrayImage.from_array(frame)


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels with at least one differing 8-neighbour."""
    out = np.zeros(labels.shape, dtype=bool)
    h, w = labels.shape
    padded = np.pad(labels, 1, mode="edge")
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            out |= padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] != labels
    return out


def true_boundary_edges(truth: LabelImage) -> EdgeMap:
    """Exact class-boundary edge map (both sides of every boundary)."""
    return EdgeMap.from_array(boundary_mask(truth.data))


def exact_edge_config():
    """Detector thresholds that recover the true boundary mask on
    rendered phantom frames.

    The texture never moves the L1 Sobel magnitude above 16, while the
    weakest boundary response (a single differing corner neighbour at
    the minimum class-intensity gap) stays above 48, so low=32/high=100
    with no blur separates them with margin on both sides.
    """
    from .edgedet import EdgeDetectorConfig

    return EdgeDetectorConfig(low_threshold=32.0, high_threshold=100.0, blur_radius=0)


def _interior_ok(labels: np.ndarray, class_id: int, min_component: int) -> bool:
    """Every 4-connected interior component of the class must be at least
    min_component pixels, and at least one must exist."""
    interior = (labels == class_id) & ~boundary_mask(labels)
    if not interior.any():
        return False
    comp, n = ndimage.label(interior, structure=_FOUR)
    sizes = np.bincount(comp.ravel())[1:]
    return bool((sizes >= min_component).all())


def _absorb_exact(labels: np.ndarray, class_id: int, where=None) -> bool:
    """True when every boundary pixel of the class 8-touches interior of
    the same class (such pixels re-join their own region in one
    absorption sweep, making refinement pixel-exact there)."""
    mask = labels == class_id
    b = boundary_mask(labels)
    interior = mask & ~b
    covered = ndimage.binary_dilation(interior, structure=_EIGHT)
    viol = mask & b & ~covered
    if where is not None:
        viol = viol & where
    return not bool(viol.any())


def _grow_exact_blob(coords, target: int, shape) -> np.ndarray | None:
    """Union of 3x3 blocks around greedily chosen core pixels, grown in
    metric order until it covers exactly ``target`` pixels.

    The union-of-blocks construction guarantees each blob pixel sits in
    a full 3x3 square inside the blob, so its rim always touches its own
    interior.  Returns None when the exact count cannot be reached.
    """
    mask = np.zeros(shape, dtype=bool)
    count = 0
    for _ in range(8):
        progress = False
        for y, x in coords:
            block = mask[y - 1:y + 2, x - 1:x + 2]
            new = 9 - int(block.sum())
            if new == 0 or count + new > target:
                continue
            block[:] = True
            count += new
            progress = True
            if count == target:
                return mask
        if not progress:
            return None
    return None


def _draw_sites(rng, size: int, count: int, min_sep: float):
    margin = max(2, size // 16)
    sites = []
    for _ in range(400):
        cand = rng.integers(margin, size - margin, size=2)
        if all((cand[0] - s[0]) ** 2 + (cand[1] - s[1]) ** 2 >= min_sep**2 for s in sites):
            sites.append((int(cand[0]), int(cand[1])))
            if len(sites) == count:
                return sites
    return None


def generate_scene(spec: SceneSpec) -> PhantomScene:
    """Deterministic phantom scene for a spec and seed.

    Voronoi cells become organ classes 0..num_regions-1 (each at least
    100 pixels, with fat interiors so majority votes are reliable); the
    lesion class is always the last class id, present or not.  Raises
    InfeasibleSpec when the requested regions can never fit or no
    acceptable layout is found.
    """
    size, k = spec.size, spec.num_regions
    if k * MIN_REGION_PIXELS > size * size:
        raise InfeasibleSpec(
            f"{k} regions x {MIN_REGION_PIXELS} px exceed a {size}x{size} scene"
        )
    lesion_area = spec.lesion_area
    if lesion_area is None:
        lesion_area = max(40, round(0.03 * size * size))

    rng_layout = _stream(spec.seed, 0)
    rng_lesion = _stream(spec.seed, 1)
    ys, xs = np.mgrid[0:size, 0:size]
    num_classes = k + 1
    lesion_class = k

    for _ in range(200):
        sites = _draw_sites(rng_layout, size, k, min_sep=max(3.0, size / (k + 1)))
        if sites is None:
            continue
        dist2 = np.stack([(xs - sx) ** 2 + (ys - sy) ** 2 for sx, sy in sites])
        cells = np.argmin(dist2, axis=0).astype(np.int32)
        counts = np.bincount(cells.ravel(), minlength=k)
        if counts.min() < MIN_REGION_PIXELS:
            continue
        host = int(np.argmax(counts))

        labels = cells.copy()
        if spec.lesion:
            host_mask = cells == host
            # lesion core pixels stay >= 5 inside the host, so the dilated
            # blob keeps >= 4 pixels of clearance from every other boundary
            core_cand = ndimage.binary_erosion(host_mask, structure=_EIGHT, iterations=5)
            if core_cand.sum() < max(16, lesion_area // 3):
                continue
            dt = ndimage.distance_transform_edt(host_mask)
            center_flat = int(np.argmax(np.where(core_cand, dt, -1.0)))
            cy, cx = divmod(center_flat, size)
            ratio = float(rng_lesion.uniform(1.0, 1.2))
            theta = float(rng_lesion.uniform(0.0, np.pi))
            dy = (ys - cy).astype(np.float64)
            dx = (xs - cx).astype(np.float64)
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            metric = (u / ratio) ** 2 + v**2
            cand_idx = np.flatnonzero(core_cand.ravel())
            order = np.lexsort(
                (xs.ravel()[cand_idx], ys.ravel()[cand_idx], metric.ravel()[cand_idx])
            )
            coords = [divmod(int(i), size) for i in cand_idx[order]]
            lesion_mask = _grow_exact_blob(coords, lesion_area, labels.shape)
            if lesion_mask is None:
                continue
            labels[lesion_mask] = lesion_class
            near = ndimage.binary_dilation(lesion_mask, structure=_EIGHT, iterations=3)
            if not (_absorb_exact(labels, lesion_class)
                    and _absorb_exact(labels, host, where=near & ~lesion_mask)):
                continue

        classes_present = [c for c in range(k)] + ([lesion_class] if spec.lesion else [])
        ok = True
        for c in classes_present:
            min_comp = 12 if c == lesion_class else 30
            if not _interior_ok(labels, c, min_comp):
                ok = False
                break
        if not ok:
            continue

        truth = LabelImage.from_array(labels, num_classes=num_classes)
        frame = render_frame(truth, spec.seed)
        names = tuple(
            HOST_CLASS_NAME if c == host else f"organ_{c}" for c in range(k)
        ) + (LESION_CLASS_NAME,)
        return PhantomScene(
            truth=truth,
            frame=frame,
            lesion_class=lesion_class,
            seed=spec.seed,
            spec=spec,
            class_names=names,
            host_class=host,
        )
    raise InfeasibleSpec(f"no acceptable layout found for {spec}")


def corrupt(truth: LabelImage, noise: NoiseSpec, seed: int) -> ProbMap:
    """Noisy probability map built from exact ground truth.

    Eligible pixels (all of them for iid_flip; within ``band`` Chebyshev
    pixels of a class boundary for boundary_band) flip to a uniformly
    drawn different class with probability p.  Flipped pixels encode the
    new winner at 0.6 with the remaining 0.4 spread over the other
    classes; untouched pixels stay exact one-hot.
    """
    c = truth.num_classes
    rng = np.random.default_rng(seed)
    coins = rng.random(truth.data.shape) < noise.p
    draws = rng.integers(0, c - 1, size=truth.data.shape)
    if noise.mode == "iid_flip":
        eligible = np.ones(truth.data.shape, dtype=bool)
    else:
        eligible = boundary_mask(truth.data)
        if noise.band > 1:
            eligible = ndimage.binary_dilation(
                eligible, structure=_EIGHT, iterations=noise.band - 1
            )
    flips = coins & eligible
    flipped_class = draws + (draws >= truth.data)

    data = one_hot(truth).data.copy()
    if flips.any():
        spread = np.float32(0.4 / (c - 1))
        rows = data.reshape(-1, c)
        flat = flips.ravel()
        rows[flat] = spread
        rows[flat, flipped_class.ravel()[flat]] = np.float32(0.6)
    return ProbMap.from_array(data)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _as_mask(m) -> np.ndarray:
    a = np.asarray(m)
    if a.dtype != np.bool_:
        a = a.astype(bool)
    return a


def iou(a, b) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    ma, mb = _as_mask(a), _as_mask(b)
    if ma.shape != mb.shape:
        raise SizeMismatch(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    union = np.logical_or(ma, mb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(ma, mb).sum() / union)


def dice(a, b) -> float:
    """Dice coefficient; 1.0 when both masks are empty."""
    ma, mb = _as_mask(a), _as_mask(b)
    if ma.shape != mb.shape:
        raise SizeMismatch(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(ma, mb).sum() / total)


def macro_iou(pred: LabelImage, truth: LabelImage) -> float:
    """Mean per-class IoU over classes present in the truth."""
    if pred.data.shape != truth.data.shape:
        raise SizeMismatch(
            f"label images differ in size: {pred.width}x{pred.height} vs "
            f"{truth.width}x{truth.height}"
        )
    classes = np.unique(truth.data)
    scores = [iou(pred.data == c, truth.data == c) for c in classes]
    return float(np.mean(scores))


def augment_rotations(dataset):
    """Expand each (frame, truth) pair to its four quarter-turn rotations."""
    out = []
    for frame, truth in dataset:
        for turns in range(4):
            out.append((rotate_quarter(frame, turns), rotate_quarter(truth, turns)))
    return out


# ---------------------------------------------------------------------------
# Scene bundles on disk
# ---------------------------------------------------------------------------

def save_scene(scene: PhantomScene, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame_path = out / "frame.pgm"
    truth_path = out / "truth.pgm"
    meta_path = out / "meta.json"
    frame_path.write_bytes(encode_pgm(scene.frame))
    truth_path.write_bytes(
        encode_pgm(GrayImage.from_array(scene.truth.data.astype(np.uint8)))
    )
    meta = {
        "version": 1,
        "spec": scene.spec.to_dict(),
        "num_classes": scene.truth.num_classes,
        "class_names": list(scene.class_names),
        "lesion_class": scene.lesion_class,
        "host_class": scene.host_class,
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return [frame_path, truth_path, meta_path]


def load_scene(scene_dir) -> PhantomScene:
    base = Path(scene_dir)
    try:
        meta = json.loads((base / "meta.json").read_text())
        frame = decode_image((base / "frame.pgm").read_bytes())
        truth_gray = decode_image((base / "truth.pgm").read_bytes())
    except OSError as exc:
        raise MalformedFile(f"cannot read scene bundle: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"bad scene meta.json: {exc}") from exc
    spec = SceneSpec.from_dict(meta["spec"])
    truth = LabelImage.from_array(
        truth_gray.data.astype(np.int32), num_classes=int(meta["num_classes"])
    )
    return PhantomScene(
        truth=truth,
        frame=frame,
        lesion_class=int(meta["lesion_class"]),
        seed=spec.seed,
        spec=spec,
        class_names=tuple(meta["class_names"]),
        host_class=int(meta["host_class"]),
    )
