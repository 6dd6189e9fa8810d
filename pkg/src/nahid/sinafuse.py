"""Edge-guided refinement of probability maps (the Sina fusion pass).

Detected boundaries are treated as hard walls: non-edge pixels are
partitioned into 4-connected components, every component is labeled by a
majority vote of its pixels' winning classes, and edge pixels are then
absorbed into neighbouring regions.  The result is a total, edge-respecting
relabeling of the frame.

Pipeline stages are exposed separately (:func:`partition_regions`,
:func:`majority_label`, :func:`assign_edge_pixels`) and composed by
:func:`refine`.  Every stage is deterministic, including all tie rules,
so parallel execution cannot change the output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .edgedet import EdgeDetectorConfig, EdgeMap, detect_edges
from .errors import InvariantViolation, SizeMismatch
from .raster import GrayImage, LabelImage, ProbMap, encode_pgm, require_same_size
from ._parallel import map_row_bands

_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_UNASSIGNED = -1
_SENTINEL = np.int64(2**31 - 1)
_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass(frozen=True)
class RegionRecord:
    region_id: int
    label: int
    pixel_count: int
    label_histogram: tuple
    confidence: float


@dataclass
class RegionMap:
    """Region partition of a frame.

    ``region_of`` holds a region id per pixel (-1 while a pixel is still
    unassigned, i.e. before edge absorption).  ``regions`` is empty for a
    bare partition skeleton.  ``class_probs``/``class_argmax`` carry the
    effective per-pixel probabilities between pipeline stages; they are
    not part of the serialized form.
    """

    width: int
    height: int
    region_of: np.ndarray = field(repr=False)
    regions: list = field(default_factory=list)
    num_regions: int = 0
    num_classes: int = 0
    class_argmax: np.ndarray | None = field(default=None, repr=False)
    class_probs: np.ndarray | None = field(default=None, repr=False)

    def is_total(self) -> bool:
        return bool((self.region_of >= 0).all())


def _effective_probs(probs: ProbMap, binary_threshold: float):
    """Winning class per pixel plus an explicit per-class probability cube.

    Single-channel maps expand to the two effective classes
    {0: background, 1: foreground} at the given threshold.
    """
    if probs.num_classes == 1:
        p = probs.data[:, :, 0]
        argmax = (p >= binary_threshold).astype(np.int32)
        cube = np.stack([np.float32(1.0) - p, p], axis=2)
        return argmax, cube
    # np.argmax returns the lowest class id on exact ties
    argmax = np.argmax(probs.data, axis=2).astype(np.int32)
    return argmax, probs.data


def partition_regions(edges: EdgeMap) -> RegionMap:
    """Split non-edge pixels into maximal 4-connected regions.

    Edge pixels stay unassigned (-1).  Region ids are dense and follow
    first-encounter row-major order, so the labeling is deterministic.
    An all-edge mask yields zero regions.
    """
    non_edge = ~edges.data
    labels, n = ndimage.label(non_edge, structure=_FOUR)
    if n == 0:
        region_of = np.full(edges.data.shape, _UNASSIGNED, dtype=np.int32)
        return RegionMap(edges.width, edges.height, region_of, [], 0)
    # renumber components by first occurrence in the flattened array
    values, first = np.unique(labels.ravel(), return_index=True)
    mask = values > 0
    order = np.argsort(first[mask], kind="stable")
    remap = np.full(n + 1, _UNASSIGNED, dtype=np.int32)
    remap[values[mask][order]] = np.arange(n, dtype=np.int32)
    return RegionMap(edges.width, edges.height, remap[labels], [], n)


def _pick_labels(hist: np.ndarray, mass: np.ndarray) -> np.ndarray:
    """Winning class per region: max count, then max probability mass,
    then lowest class id."""
    best_count = hist.max(axis=1, keepdims=True)
    cand = hist == best_count
    masked = np.where(cand, mass, -np.inf)
    cand &= masked == masked.max(axis=1, keepdims=True)
    return np.argmax(cand, axis=1).astype(np.int32)


def _build_records(region_of, n_regions, argmax, probs_cube):
    h, w, c = probs_cube.shape
    mask = region_of >= 0
    rid = region_of[mask].astype(np.int64)
    votes = argmax[mask].astype(np.int64)
    hist = np.bincount(rid * c + votes, minlength=n_regions * c).reshape(n_regions, c)
    mass = np.empty((n_regions, c), dtype=np.float64)
    flat_probs = probs_cube.reshape(-1, c)[mask.ravel()]
    for k in range(c):
        mass[:, k] = np.bincount(rid, weights=flat_probs[:, k], minlength=n_regions)
    labels = _pick_labels(hist, mass)
    counts = hist.sum(axis=1)
    records = []
    for r in range(n_regions):
        conf = float(mass[r, labels[r]] / counts[r]) if counts[r] > 0 else 0.0
        records.append(RegionRecord(
            region_id=r,
            label=int(labels[r]),
            pixel_count=int(counts[r]),
            label_histogram=tuple(int(x) for x in hist[r]),
            confidence=conf,
        ))
    return records


def majority_label(skeleton: RegionMap, probs: ProbMap,
                   binary_threshold: float = 0.5) -> RegionMap:
    """Label every region by the plurality of its pixels' winning classes.

    Ties go to the class with the larger summed probability mass over the
    region, then to the lower class id.  Edge pixels remain unassigned.
    """
    if skeleton.width != probs.width or skeleton.height != probs.height:
        raise SizeMismatch(
            f"region skeleton {skeleton.width}x{skeleton.height} vs "
            f"probability map {probs.width}x{probs.height}"
        )
    argmax, cube = _effective_probs(probs, binary_threshold)
    records = _build_records(skeleton.region_of, skeleton.num_regions, argmax, cube)
    return RegionMap(
        width=skeleton.width,
        height=skeleton.height,
        region_of=skeleton.region_of.copy(),
        regions=records,
        num_regions=skeleton.num_regions,
        num_classes=cube.shape[2],
        class_argmax=argmax,
        class_probs=cube,
    )


def _sweep_plan(snap: np.ndarray) -> np.ndarray:
    """One absorption sweep, planned from a snapshot.

    For every pixel, find the region id held by the plurality of its
    assigned 8-neighbours (ties to the lowest id).  Returns the winner
    and its neighbour count packed as ``winner * 16 + count`` so the
    plan can be row-banded as a single array; count 0 means no assigned
    neighbour.
    """
    h, w = snap.shape
    padded = np.full((h + 2, w + 2), _UNASSIGNED, dtype=np.int32)
    padded[1:-1, 1:-1] = snap
    neigh = np.empty((8, h, w), dtype=np.int64)
    for k, (dy, dx) in enumerate(_OFFSETS):
        neigh[k] = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    neigh[neigh < 0] = _SENTINEL
    neigh.sort(axis=0)

    best_count = np.zeros((h, w), dtype=np.int64)
    best_val = np.full((h, w), _SENTINEL, dtype=np.int64)
    for k in range(8):
        vk = neigh[k]
        ck = (neigh == vk[None, :, :]).sum(axis=0)
        ck[vk == _SENTINEL] = 0
        # strict > keeps the earliest (lowest, since sorted) id on ties
        better = ck > best_count
        best_val[better] = vk[better]
        best_count[better] = ck[better]
    return best_val * 16 + best_count


def assign_edge_pixels(rm: RegionMap, workers: int = 1) -> RegionMap:
    """Absorb unassigned (edge) pixels into adjacent regions.

    Repeated sweeps, each planned from the assignment state at the start
    of the sweep: an unassigned pixel with at least one assigned
    8-neighbour joins the region held by the plurality of those
    neighbours (ties to the lowest region id).  A fully-unassigned map
    collapses to a single region labeled by global vote plurality.
    Region statistics and labels are recomputed over the final
    membership.
    """
    if rm.class_probs is None or rm.class_argmax is None:
        raise InvariantViolation("assign_edge_pixels needs a majority-labeled RegionMap")
    region_of = rm.region_of.copy()
    n_regions = rm.num_regions
    if n_regions == 0:
        region_of[:] = 0
        n_regions = 1
    while True:
        unassigned = region_of < 0
        if not unassigned.any():
            break
        plan = map_row_bands(_sweep_plan, region_of, halo=1, workers=workers)
        winner = plan >> 4
        count = plan & 15
        newly = unassigned & (count > 0)
        if not newly.any():
            raise InvariantViolation("absorption cannot progress")  # unreachable on grids
        region_of[newly] = winner[newly].astype(np.int32)
    records = _build_records(region_of, n_regions, rm.class_argmax, rm.class_probs)
    return RegionMap(
        width=rm.width,
        height=rm.height,
        region_of=region_of,
        regions=records,
        num_regions=n_regions,
        num_classes=rm.num_classes,
        class_argmax=rm.class_argmax,
        class_probs=rm.class_probs,
    )


def refine(frame: GrayImage, probs: ProbMap, cfg: EdgeDetectorConfig | None = None,
           workers: int = 1, binary_threshold: float = 0.5) -> RegionMap:
    """Full fusion pass: detect edges, partition, vote, absorb.

    ``workers`` parallelizes the convolution stages; the output is
    byte-identical for any worker count.
    """
    require_same_size(frame, probs, "frame and probability map")
    edges = detect_edges(frame, cfg, workers=workers)
    skeleton = partition_regions(edges)
    labeled = majority_label(skeleton, probs, binary_threshold)
    return assign_edge_pixels(labeled, workers=workers)


def refine_with_edges(edges: EdgeMap, probs: ProbMap,
                      binary_threshold: float = 0.5) -> RegionMap:
    """Fusion pass on a precomputed edge map (detector bypassed)."""
    if edges.width != probs.width or edges.height != probs.height:
        raise SizeMismatch(
            f"edge map {edges.width}x{edges.height} vs "
            f"probability map {probs.width}x{probs.height}"
        )
    skeleton = partition_regions(edges)
    return assign_edge_pixels(majority_label(skeleton, probs, binary_threshold))


def to_label_image(rm: RegionMap) -> LabelImage:
    """Final class id per pixel.  Requires a total assignment."""
    if not rm.is_total():
        raise InvariantViolation("region map still has unassigned pixels")
    lut = np.array([rec.label for rec in rm.regions], dtype=np.int32)
    return LabelImage.from_array(lut[rm.region_of], num_classes=max(2, rm.num_classes))


def region_table(rm: RegionMap) -> dict:
    """External JSON form of the region table."""
    return {
        "regions": [
            {
                "id": rec.region_id,
                "label": rec.label,
                "pixel_count": rec.pixel_count,
                "confidence": rec.confidence,
            }
            for rec in rm.regions
        ]
    }


def serialize_region_map(rm: RegionMap) -> bytes:
    """Canonical bytes: label image as PGM, then the JSON region table."""
    pgm = encode_pgm(GrayImage.from_array(to_label_image(rm).data.astype(np.uint8)))
    table = json.dumps(region_table(rm), sort_keys=True, separators=(",", ":"))
    return pgm + b"\n" + table.encode("ascii")
