"""Probabilistic organ-presence voxel grid.

A coarse spatial prior: every voxel stores a probability vector over a
fixed organ list (the remainder up to 1 is empty space).  The planner
uses it to sanity-check what a camera pose should be able to see; it is
deliberately not a renderer, so queries are nearest-voxel with no
interpolation.

File format: a JSON document with the grid header (origin, voxel_size,
dims, organs, free-form covariates) and the float32 payload either
inline base64 ("data_b64") or in a raw little-endian sidecar file
("data_file", path relative to the JSON).  Layout: x varies fastest
among the spatial axes, organ channel innermost.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvariantViolation, MalformedFile, OutOfBounds

PRESENCE_SUM_TOL = 1e-5


@dataclass(frozen=True)
class GeometricModel:
    """Voxel grid of organ-presence probabilities.

    ``data`` has shape (nz, ny, nx, n_organs); per-voxel sums may not
    exceed 1.
    """

    origin: tuple
    voxel_size: float
    dims: tuple
    organs: tuple
    data: np.ndarray = field(repr=False)
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise InvariantViolation("voxel_size must be > 0")
        nx, ny, nz = self.dims
        if min(nx, ny, nz) < 1:
            raise InvariantViolation("dims must all be >= 1")
        if len(self.organs) < 1:
            raise InvariantViolation("need at least one organ")
        if len(set(self.organs)) != len(self.organs):
            raise InvariantViolation("duplicate organ names")
        if self.data.shape != (nz, ny, nx, len(self.organs)):
            raise InvariantViolation(
                f"data shape {self.data.shape} does not match dims {self.dims}"
            )
        if self.data.dtype != np.float32:
            raise InvariantViolation("presence data must be float32")
        if bool((self.data < 0).any()) or bool((self.data > 1).any()):
            raise InvariantViolation("presence probabilities outside [0, 1]")
        sums = self.data.astype(np.float64).sum(axis=3)
        if bool((sums > 1.0 + PRESENCE_SUM_TOL).any()):
            raise InvariantViolation("voxel presence probabilities sum above 1")
        self.data.setflags(write=False)

    def voxel_index(self, p) -> tuple:
        """(ix, iy, iz) of the containing voxel, or OutOfBounds.

        The bounding box is half-open: points exactly on the upper faces
        are outside.
        """
        idx = []
        for axis in range(3):
            rel = (p[axis] - self.origin[axis]) / self.voxel_size
            i = math.floor(rel)
            if i < 0 or i >= self.dims[axis]:
                raise OutOfBounds(
                    f"point {tuple(p)} outside grid on axis {axis} "
                    f"(index {i}, dim {self.dims[axis]})"
                )
            idx.append(i)
        return tuple(idx)

    def voxel_center(self, idx) -> tuple:
        return tuple(
            self.origin[axis] + (idx[axis] + 0.5) * self.voxel_size for axis in range(3)
        )


def query_point(model: GeometricModel, p) -> dict:
    """Organ-presence vector of the voxel containing ``p``.

    Piecewise constant: any two points in one voxel return identical
    vectors.
    """
    ix, iy, iz = model.voxel_index(p)
    vec = model.data[iz, iy, ix]
    return {organ: float(vec[k]) for k, organ in enumerate(model.organs)}


def expected_visible(model: GeometricModel, node, radius: float) -> list:
    """Organs likely visible around a node, most probable first.

    Aggregates the mean presence per organ over all voxels whose center
    lies within ``radius`` of the node position; the containing voxel is
    always included.  Organs with mean 0 are dropped; ties keep the
    organ-list order.  Raises OutOfBounds when the pose is outside the
    grid.
    """
    pos = (node.pose.x, node.pose.y, node.pose.z)
    own = model.voxel_index(pos)

    nx, ny, nz = model.dims
    zs, ys, xs = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    cx = model.origin[0] + (xs + 0.5) * model.voxel_size
    cy = model.origin[1] + (ys + 0.5) * model.voxel_size
    cz = model.origin[2] + (zs + 0.5) * model.voxel_size
    dist2 = (cx - pos[0]) ** 2 + (cy - pos[1]) ** 2 + (cz - pos[2]) ** 2
    selected = dist2 <= radius * radius
    selected[own[2], own[1], own[0]] = True

    means = model.data[selected].astype(np.float64).mean(axis=0)
    ranked = sorted(
        (k for k in range(len(model.organs)) if means[k] > 0.0),
        key=lambda k: (-means[k], k),
    )
    return [(model.organs[k], float(means[k])) for k in ranked]


def visible_organ_names(model: GeometricModel, node, radius: float) -> list:
    return [name for name, _ in expected_visible(model, node, radius)]


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def model_to_dict(model: GeometricModel, inline: bool = True) -> dict:
    d = {
        "version": 1,
        "origin": list(model.origin),
        "voxel_size": model.voxel_size,
        "dims": list(model.dims),
        "organs": list(model.organs),
        "covariates": model.covariates,
    }
    if inline:
        d["data_b64"] = base64.b64encode(
            model.data.astype("<f4", copy=False).tobytes()
        ).decode("ascii")
    return d


def save_geomodel(model: GeometricModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2, sort_keys=True))


def load_geomodel(path) -> GeometricModel:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"cannot read geometric model: {exc}") from exc
    return model_from_dict(d, base_dir=path.parent)


def model_from_dict(d: dict, base_dir=None) -> GeometricModel:
    try:
        origin = tuple(float(v) for v in d["origin"])
        voxel_size = float(d["voxel_size"])
        dims = tuple(int(v) for v in d["dims"])
        organs = tuple(d["organs"])
        if "data_b64" in d:
            raw = base64.b64decode(d["data_b64"])
        elif "data_file" in d:
            sidecar = Path(d["data_file"])
            if base_dir is not None and not sidecar.is_absolute():
                sidecar = Path(base_dir) / sidecar
            raw = sidecar.read_bytes()
        else:
            raise MalformedFile("geometric model has neither data_b64 nor data_file")
        expected = dims[0] * dims[1] * dims[2] * len(organs) * 4
        if len(raw) != expected:
            raise MalformedFile(
                f"presence payload is {len(raw)} bytes, expected {expected}"
            )
        data = np.frombuffer(raw, dtype="<f4").reshape(
            dims[2], dims[1], dims[0], len(organs)
        )
        return GeometricModel(
            origin=origin,
            voxel_size=voxel_size,
            dims=dims,
            organs=organs,
            data=data.copy(),
            covariates=dict(d.get("covariates", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"bad geometric model: {exc}") from exc
