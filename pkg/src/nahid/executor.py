"""Closed-loop plan executor.

Walks a camera-pose tree along a declared state order and performs each
node's task: Navigate (just move), Detect (segment and measure a target
class), Treat (iterate fire/verify until the target is cleared) and
Verify (assert a residual bound).  Every run produces a deterministic
:class:`ActionLog`; any domain error rolls the camera back along the
unique tree path to the state's failure target and aborts.

The simulation environment is pluggable; :class:`PhantomEnv` wraps a
synthetic scene, re-renders frames after ablation and clears lesion
pixels inside fired disks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .edgedet import EdgeDetectorConfig
from .errors import InvalidConfig, MalformedFile, NahidError, OutOfBounds
from .geomodel import GeometricModel, load_geomodel, visible_organ_names
from .phantom import PhantomScene, SceneSpec, generate_scene, render_frame
from .raster import GrayImage, LabelImage, ProbMap
from .segbackend import ModelRegistry, infer, load_registry, resolve
from .sinafuse import RegionMap, refine, to_label_image
from .sinatree import SinaTree, deserialize_tree, find_path, validate

LOG_SCHEMA = "nahid.actionlog/1"

EVENT_KINDS = (
    "ENTER",
    "DETECT_RESULT",
    "TREAT_FIRE",
    "VERIFY_RESULT",
    "ROLLBACK",
    "COMPLETE",
    "ABORT",
)


class _TaskFailed(NahidError):
    """Internal: a task could not reach its goal; triggers rollback."""


@dataclass(frozen=True)
class ActionEvent:
    step_index: int
    node_id: str
    kind: str
    payload: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "step_index": self.step_index,
                "node_id": self.node_id,
                "event": self.kind,
                "payload": self.payload,
            },
            sort_keys=True,
            separators=(",", ":"),
        )


@dataclass
class ActionLog:
    seed: int
    events: list = field(default_factory=list)

    def append(self, step_index: int, node_id: str, kind: str, payload: dict = None):
        if kind not in EVENT_KINDS:
            raise InvalidConfig(f"unknown event kind {kind!r}")
        self.events.append(ActionEvent(step_index, node_id, kind, dict(payload or {})))

    @property
    def terminal(self) -> str | None:
        for ev in reversed(self.events):
            if ev.kind in ("COMPLETE", "ABORT"):
                return ev.kind
        return None

    def events_of(self, kind: str):
        return [ev for ev in self.events if ev.kind == kind]

    def to_jsonl(self) -> str:
        header = json.dumps(
            {"schema": LOG_SCHEMA, "seed": self.seed},
            sort_keys=True,
            separators=(",", ":"),
        )
        return "\n".join([header] + [ev.to_json() for ev in self.events]) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "ActionLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise MalformedFile("empty action log")
        header = json.loads(lines[0])
        if header.get("schema") != LOG_SCHEMA:
            raise MalformedFile(f"unsupported log schema {header.get('schema')!r}")
        log = cls(seed=int(header["seed"]))
        for ln in lines[1:]:
            d = json.loads(ln)
            log.append(d["step_index"], d["node_id"], d["event"], d["payload"])
        return log


@dataclass(frozen=True)
class DetectionResult:
    region_map: RegionMap
    target_mask: np.ndarray
    area: int
    confidence: float


@dataclass
class SurgicalPlan:
    """Everything one execution needs, minus the environment."""

    tree: SinaTree
    registry: ModelRegistry
    state_order: list
    geomodel: GeometricModel | None = None
    failure_policy: dict = field(default_factory=dict)
    edge_config: EdgeDetectorConfig = field(default_factory=EdgeDetectorConfig)
    visibility_radius: float = 50.0
    environment: dict | None = None
    arms: dict | None = None  # reserved for arm poses; execution ignores it

    def rollback_target(self, node_id: str) -> str:
        per_state = self.failure_policy.get("per_state", {})
        return per_state.get(node_id, self.failure_policy.get("default", self.tree.root))


def validate_plan(plan: SurgicalPlan, check_registry: bool = False):
    """Structural checks; returns the tree validation report after
    verifying the state order is a root-anchored walk along edges."""
    report = validate(plan.tree, plan.registry if check_registry else None)
    problems = list(report.violations)
    order = plan.state_order
    if not order:
        problems.append("state_order is empty")
    else:
        if order[0] != plan.tree.root:
            problems.append(f"state_order must start at root {plan.tree.root!r}")
        for nid in order:
            if nid not in plan.tree.nodes:
                problems.append(f"state_order references unknown node {nid!r}")
        for a, b in zip(order, order[1:]):
            if a != b and not plan.tree.has_edge(a, b):
                problems.append(f"state_order jumps from {a!r} to {b!r} without an edge")
    return type(report)(len(problems) == 0, tuple(problems))


# ---------------------------------------------------------------------------
# Treatment planning
# ---------------------------------------------------------------------------

def plan_targets(mask: np.ndarray, spacing: int) -> list:
    """Lattice of ablation points inside a target mask.

    Row-major scan of the mask's bounding box with stride ``spacing`` on
    both axes, anchored at the box corner; only points inside the mask
    are emitted.  Deterministic; an empty mask yields an empty list.
    """
    if spacing < 1:
        raise InvalidConfig("spacing must be >= 1")
    m = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        return []
    y0, y1 = int(ys.min()), int(ys.max())
    x0, x1 = int(xs.min()), int(xs.max())
    return [
        (x, y)
        for y in range(y0, y1 + 1, spacing)
        for x in range(x0, x1 + 1, spacing)
        if m[y, x]
    ]


# ---------------------------------------------------------------------------
# Simulation environment
# ---------------------------------------------------------------------------

class PhantomEnv:
    """Mutable surgical site backed by a phantom scene.

    ``observe`` renders the frame for the current tissue state (texture
    stays fixed across ablations); ``ablate`` clears lesion pixels inside
    a Euclidean disk around every target point, exposing the host organ
    underneath.
    """

    def __init__(self, scene: PhantomScene):
        self.seed = scene.seed
        self._num_classes = scene.truth.num_classes
        self._lesion_class = scene.lesion_class
        base = scene.truth.data.copy()
        base[base == scene.lesion_class] = scene.host_class
        self._base = base
        self._lesion = scene.truth.data == scene.lesion_class
        h, w = base.shape
        self._ys, self._xs = np.mgrid[0:h, 0:w]

    @classmethod
    def from_spec(cls, env_spec: dict, seed: int | None = None) -> "PhantomEnv":
        if env_spec.get("kind", "phantom") != "phantom":
            raise InvalidConfig(f"unknown environment kind {env_spec.get('kind')!r}")
        scene_seed = env_spec.get("seed", 0) if seed is None else seed
        spec = SceneSpec(
            size=int(env_spec["size"]),
            num_regions=int(env_spec["num_regions"]),
            lesion=bool(env_spec.get("lesion", True)),
            seed=int(scene_seed),
            lesion_area=env_spec.get("lesion_area"),
        )
        return cls(generate_scene(spec))

    @property
    def lesion_area(self) -> int:
        return int(self._lesion.sum())

    def lesion_mask(self) -> np.ndarray:
        return self._lesion.copy()

    def current_truth(self) -> LabelImage:
        labels = self._base.copy()
        labels[self._lesion] = self._lesion_class
        return LabelImage.from_array(labels, num_classes=self._num_classes)

    def observe(self, node_id: str):
        truth = self.current_truth()
        return render_frame(truth, self.seed), truth

    def ablate(self, points, radius: float) -> None:
        r2 = float(radius) ** 2
        cleared = np.zeros_like(self._lesion)
        for x, y in points:
            cleared |= (self._xs - x) ** 2 + (self._ys - y) ** 2 <= r2
        self._lesion &= ~cleared


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def _target_class_id(classes, target_class: str) -> int:
    if len(classes) == 1:
        if target_class != classes[0]:
            raise InvalidConfig(
                f"target class {target_class!r} not available (binary model for "
                f"{classes[0]!r})"
            )
        return 1
    try:
        return classes.index(target_class)
    except ValueError:
        raise InvalidConfig(
            f"target class {target_class!r} not in situation classes {list(classes)}"
        ) from None


def detect_at(plan: SurgicalPlan, node_id: str, frame: GrayImage,
              probs: ProbMap | None = None, truth: LabelImage | None = None,
              workers: int = 1) -> DetectionResult:
    """Segment one frame at a node and measure its task's target class.

    Either a precomputed probability map or (for oracle backends) the
    ground truth must be given.  The returned mask holds the pixels whose
    refined region label equals the target class.
    """
    node = plan.tree.node(node_id)
    task = node.task
    if task.target_class is None:
        raise InvalidConfig(f"node {node_id!r} task {task.kind} has no target class")
    desc = resolve(plan.registry, node.situation)
    classes = plan.registry.classes_for(node.situation)
    target_id = _target_class_id(classes, task.target_class)
    if probs is None:
        probs = infer(desc, frame, truth if desc.kind == "synthetic_oracle" else None)
    rm = refine(frame, probs, plan.edge_config, workers=workers)
    labels = to_label_image(rm)
    mask = labels.data == target_id
    area = int(mask.sum())
    if area:
        confidence = float(rm.class_probs[:, :, target_id][mask].astype(np.float64).mean())
    else:
        confidence = 0.0
    return DetectionResult(region_map=rm, target_mask=mask, area=area, confidence=confidence)


def task_success(task, result: DetectionResult) -> bool:
    if task.kind == "Detect":
        return result.area >= task.min_area
    if task.kind == "Verify":
        return result.area <= task.residual_epsilon
    raise InvalidConfig(f"{task.kind} has no success criterion")


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def _geomodel_warning(plan: SurgicalPlan, node, target_class: str) -> bool:
    if plan.geomodel is None:
        return False
    try:
        names = visible_organ_names(plan.geomodel, node, plan.visibility_radius)
    except OutOfBounds:
        return True
    return target_class not in names


def execute(plan: SurgicalPlan, env, workers: int = 1) -> ActionLog:
    """Run a plan to COMPLETE or ABORT; every outcome lands in the log.

    Deterministic given (plan, environment seed): two runs produce
    byte-identical serialized logs.
    """
    report = validate_plan(plan)
    if not report.ok:
        raise InvalidConfig("invalid plan: " + "; ".join(report.violations))

    log = ActionLog(seed=int(getattr(env, "seed", 0)))
    treated = False
    found_nothing = False

    for step, node_id in enumerate(plan.state_order):
        node = plan.tree.node(node_id)
        task = node.task
        log.append(step, node_id, "ENTER", {"situation": node.situation, "task": task.kind})
        try:
            if task.kind == "Navigate":
                continue

            frame, truth = env.observe(node_id)
            warning = _geomodel_warning(plan, node, task.target_class)

            if task.kind == "Detect":
                res = detect_at(plan, node_id, frame, truth=truth, workers=workers)
                payload = {
                    "target_class": task.target_class,
                    "area": res.area,
                    "min_area": task.min_area,
                    "success": task_success(task, res),
                    "confidence": round(res.confidence, 6),
                }
                if warning:
                    payload["geomodel_warning"] = True
                log.append(step, node_id, "DETECT_RESULT", payload)
                # a missed detection is recorded, not fatal
                continue

            if task.kind == "Verify":
                res = detect_at(plan, node_id, frame, truth=truth, workers=workers)
                success = task_success(task, res)
                log.append(step, node_id, "VERIFY_RESULT", {
                    "target_class": task.target_class,
                    "area": res.area,
                    "epsilon": task.residual_epsilon,
                    "success": success,
                })
                if not success:
                    raise _TaskFailed(
                        f"residual {task.target_class} area {res.area} exceeds "
                        f"{task.residual_epsilon}"
                    )
                continue

            # Treat: detect, then fire/verify until clear or out of budget
            res = detect_at(plan, node_id, frame, truth=truth, workers=workers)
            payload = {
                "target_class": task.target_class,
                "area": res.area,
                "success": res.area > 0,
                "confidence": round(res.confidence, 6),
            }
            if warning:
                payload["geomodel_warning"] = True
            log.append(step, node_id, "DETECT_RESULT", payload)
            if res.area == 0:
                found_nothing = True
                continue

            cleared = False
            for iteration in range(1, task.max_iters + 1):
                targets = plan_targets(res.target_mask, task.spacing)
                if not targets:
                    break
                treated = True
                log.append(step, node_id, "TREAT_FIRE", {
                    "iteration": iteration,
                    "targets": [[int(x), int(y)] for x, y in targets],
                    "radius": task.spacing,
                })
                env.ablate(targets, float(task.spacing))
                frame, truth = env.observe(node_id)
                res = detect_at(plan, node_id, frame, truth=truth, workers=workers)
                cleared = res.area == 0
                log.append(step, node_id, "VERIFY_RESULT", {
                    "target_class": task.target_class,
                    "iteration": iteration,
                    "area": res.area,
                    "epsilon": 0,
                    "success": cleared,
                })
                if cleared:
                    break
            if not cleared:
                raise _TaskFailed(
                    f"residual {task.target_class} area {res.area} persists after "
                    f"{task.max_iters} iterations"
                )

        except NahidError as exc:
            target = plan.rollback_target(node_id)
            for nid in find_path(plan.tree, node_id, target):
                log.append(step, nid, "ROLLBACK", {"target": target})
            log.append(step, node_id, "ABORT", {
                "reason": str(exc),
                "error": type(exc).__name__,
            })
            return log

    last = len(plan.state_order) - 1
    if treated:
        outcome = "treated"
    elif found_nothing:
        outcome = "no_treatment"
    else:
        outcome = "navigated"
    log.append(last, plan.state_order[-1], "COMPLETE", {"outcome": outcome})
    return log


# ---------------------------------------------------------------------------
# Plan files
# ---------------------------------------------------------------------------

def load_plan(path) -> SurgicalPlan:
    """Read a plan JSON; tree/registry/geomodel references resolve
    relative to the plan file."""
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"cannot read plan: {exc}") from exc
    base = path.parent
    try:
        tree = deserialize_tree((base / d["tree"]).read_text())
        registry = load_registry(base / d["registry"])
        geomodel = None
        if d.get("geomodel"):
            geomodel = load_geomodel(base / d["geomodel"])
        edge_cfg = EdgeDetectorConfig(**d.get("edge_config", {}))
        return SurgicalPlan(
            tree=tree,
            registry=registry,
            state_order=list(d["state_order"]),
            geomodel=geomodel,
            failure_policy=dict(d.get("failure_policy", {})),
            edge_config=edge_cfg,
            visibility_radius=float(d.get("visibility_radius_mm", 50.0)),
            environment=d.get("environment"),
            arms=d.get("arms"),
        )
    except (KeyError, TypeError, OSError) as exc:
        raise MalformedFile(f"bad plan file: {exc}") from exc
