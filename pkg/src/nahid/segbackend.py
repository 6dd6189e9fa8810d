"""Situation-keyed registry of segmentation backends.

Each surgical situation owns an independent model; the registry maps a
situation id to a backend descriptor plus that situation's ordered class
list.  Three backend kinds exist:

* ``file_backed``       — precomputed .pmap files keyed by frame content hash.
* ``synthetic_oracle``  — exact one-hot of supplied ground truth, optionally
  corrupted by a seeded noise spec (per-call seed derives from the frame
  hash, so concurrent calls cannot change results).
* ``external_process``  — a subprocess receiving the frame as PGM on stdin
  and answering with a .pmap on stdout (exit 0 on success).

No neural network runs in-process; real models attach through the file
or process contracts.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BackendProcessFailure,
    InvalidConfig,
    InvariantViolation,
    MalformedFile,
    MissingPrecomputedMap,
    ModelNotFound,
    SizeMismatch,
)
from .phantom import NoiseSpec, corrupt
from .raster import GrayImage, LabelImage, ProbMap, decode_pmap, encode_pgm, encode_pmap, one_hot

BACKEND_KINDS = ("file_backed", "synthetic_oracle", "external_process")


def frame_hash(frame: GrayImage) -> str:
    """Content hash of a frame (dimensions + raw pixels)."""
    h = hashlib.sha256()
    h.update(b"GRAY")
    h.update(frame.width.to_bytes(4, "little"))
    h.update(frame.height.to_bytes(4, "little"))
    h.update(frame.data.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str
    input_size: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise InvalidConfig(f"unknown backend kind {self.kind!r}")
        if self.input_size < 1:
            raise InvalidConfig("input_size must be >= 1")
        if self.kind == "file_backed" and "directory" not in self.params:
            raise InvalidConfig("file_backed backend needs params.directory")
        if self.kind == "synthetic_oracle":
            if "seed" not in self.params:
                raise InvalidConfig("synthetic_oracle backend needs params.seed")
            NoiseSpec.from_dict(self.params.get("noise", {"mode": "iid_flip", "p": 0.0}))
        if self.kind == "external_process":
            cmd = self.params.get("command")
            if not isinstance(cmd, (list, tuple)) or not cmd:
                raise InvalidConfig(
                    "external_process backend needs params.command as an argv list"
                )


@dataclass(frozen=True)
class RegistryEntry:
    descriptor: BackendDescriptor
    classes: tuple

    def __post_init__(self):
        if len(self.classes) < 1:
            raise InvariantViolation("a situation needs at least one class")
        if len(set(self.classes)) != len(self.classes):
            raise InvariantViolation("duplicate class names in a situation")


class ModelRegistry:
    """Immutable situation -> backend mapping."""

    def __init__(self, entries: dict):
        for sit in entries:
            if not sit:
                raise InvariantViolation("situation ids must be non-empty")
        self._entries = dict(entries)

    def has(self, situation: str) -> bool:
        return situation in self._entries

    def situations(self):
        return sorted(self._entries)

    def classes_for(self, situation: str) -> tuple:
        return self._entry(situation).classes

    def _entry(self, situation: str) -> RegistryEntry:
        try:
            return self._entries[situation]
        except KeyError:
            raise ModelNotFound(f"no model registered for situation {situation!r}") from None

    def without(self, situation: str) -> "ModelRegistry":
        """Copy with one situation removed (test/fault-injection helper)."""
        entries = dict(self._entries)
        entries.pop(situation, None)
        return ModelRegistry(entries)


def resolve(registry: ModelRegistry, situation: str) -> BackendDescriptor:
    """Backend descriptor for a situation; ModelNotFound aborts a plan."""
    return registry._entry(situation).descriptor


def _renormalize(data: np.ndarray) -> np.ndarray:
    clipped = np.clip(data, 0.0, 1.0)
    if clipped.shape[2] == 1:
        return clipped
    sums = clipped.sum(axis=2, keepdims=True)
    sums[sums == 0.0] = 1.0
    return (clipped / sums).astype(np.float32)


def _derived_seed(base_seed: int, digest: str) -> int:
    mix = hashlib.sha256(f"{base_seed}:{digest}".encode("ascii")).digest()
    return int.from_bytes(mix[:8], "little")


def infer(desc: BackendDescriptor, frame: GrayImage,
          truth: LabelImage | None = None) -> ProbMap:
    """Run one backend on one frame.

    ``truth`` must be supplied exactly for synthetic_oracle backends.
    Outputs are clamped and (multi-class) renormalized, and repeated
    calls with identical inputs return identical maps.
    """
    if frame.width != desc.input_size or frame.height != desc.input_size:
        raise SizeMismatch(
            f"frame is {frame.width}x{frame.height}, backend expects "
            f"{desc.input_size}x{desc.input_size}"
        )
    if desc.kind == "synthetic_oracle":
        if truth is None:
            raise InvariantViolation("synthetic_oracle needs ground truth")
        if truth.width != frame.width or truth.height != frame.height:
            raise SizeMismatch(
                f"truth is {truth.width}x{truth.height}, frame is "
                f"{frame.width}x{frame.height}"
            )
        noise = NoiseSpec.from_dict(desc.params.get("noise", {"mode": "iid_flip", "p": 0.0}))
        if noise.p == 0.0:
            return one_hot(truth)
        call_seed = _derived_seed(int(desc.params["seed"]), frame_hash(frame))
        noisy = corrupt(truth, noise, call_seed)
        return ProbMap.from_array(_renormalize(noisy.data))
    if truth is not None:
        raise InvariantViolation(f"{desc.kind} backend does not take ground truth")
    if desc.kind == "file_backed":
        directory = Path(desc.params["directory"])
        path = directory / f"{frame_hash(frame)}.pmap"
        if not path.is_file():
            raise MissingPrecomputedMap(
                f"no precomputed map for frame {frame_hash(frame)[:12]}... in {directory}"
            )
        pmap = decode_pmap(path.read_bytes())
        return ProbMap.from_array(_renormalize(pmap.data))
    # external_process
    cmd = [
        str(tok)
        .replace("{input_size}", str(desc.input_size))
        .replace("{width}", str(frame.width))
        .replace("{height}", str(frame.height))
        for tok in desc.params["command"]
    ]
    timeout = desc.params.get("timeout_s")
    try:
        proc = subprocess.run(
            cmd,
            input=encode_pgm(frame),
            capture_output=True,
            timeout=timeout,
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise BackendProcessFailure(f"backend process failed to run: {exc}") from exc
    if proc.returncode != 0:
        raise BackendProcessFailure(
            f"backend process exited {proc.returncode}: {proc.stderr[:200]!r}"
        )
    try:
        pmap = decode_pmap(proc.stdout)
    except (MalformedFile, InvariantViolation) as exc:
        raise BackendProcessFailure(f"backend produced an unusable map: {exc}") from exc
    return ProbMap.from_array(_renormalize(pmap.data))


def store_pmap(directory, frame: GrayImage, pmap: ProbMap) -> Path:
    """Write a precomputed map where a file_backed backend will find it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{frame_hash(frame)}.pmap"
    path.write_bytes(encode_pmap(pmap))
    return path


# ---------------------------------------------------------------------------
# Registry file format
# ---------------------------------------------------------------------------
#
# {"version": 1, "situations": {"<id>": {"kind": ..., "input_size": ...,
#  "classes": [...], "params": {...}}}}

def registry_to_dict(registry: ModelRegistry) -> dict:
    return {
        "version": 1,
        "situations": {
            sit: {
                "kind": resolve(registry, sit).kind,
                "input_size": resolve(registry, sit).input_size,
                "classes": list(registry.classes_for(sit)),
                "params": dict(resolve(registry, sit).params),
            }
            for sit in registry.situations()
        },
    }


def registry_from_dict(d: dict) -> ModelRegistry:
    try:
        if d.get("version") != 1:
            raise MalformedFile(f"unsupported registry version {d.get('version')!r}")
        entries = {}
        for sit, spec in d["situations"].items():
            entries[sit] = RegistryEntry(
                descriptor=BackendDescriptor(
                    kind=spec["kind"],
                    input_size=int(spec["input_size"]),
                    params=dict(spec.get("params", {})),
                ),
                classes=tuple(spec["classes"]),
            )
        return ModelRegistry(entries)
    except (KeyError, TypeError) as exc:
        raise MalformedFile(f"bad registry file: {exc}") from exc


def save_registry(registry: ModelRegistry, path) -> None:
    Path(path).write_text(json.dumps(registry_to_dict(registry), indent=2, sort_keys=True))


def load_registry(path) -> ModelRegistry:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"cannot read registry: {exc}") from exc
    return registry_from_dict(d)
