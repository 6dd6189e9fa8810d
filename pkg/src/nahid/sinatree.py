"""Camera-pose tree: nodes carry a pose, a situation id and a task.

The tree is the navigation backbone of a surgical plan.  Edges are the
permitted camera movements, so between any two nodes there is exactly one
simple path, which is what makes rollback well defined.  Trees are
immutable values; mutating operations return new trees.

Serialized form (JSON)::

    {"version": 1, "root": "...",
     "nodes": [{"id", "pose": {"x","y","z","yaw","pitch"}, "situation", "task": {...}}],
     "edges": [["a","b"], ...]}
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass

from .errors import (
    EdgeNotFound,
    InvalidConfig,
    InvalidFraction,
    InvariantViolation,
    MalformedFile,
    NodeNotFound,
)

TASK_KINDS = ("Navigate", "Detect", "Treat", "Verify")


def normalize_angle(a: float) -> float:
    """Map into [-180, 180]; +/-180 are both representable and preserved."""
    return float(a - 360.0 * round(a / 360.0))


def lerp_angle(a: float, b: float, fraction: float) -> float:
    """Interpolate along the shortest arc."""
    delta = normalize_angle(b - a)
    return normalize_angle(a + fraction * delta)


@dataclass(frozen=True)
class Pose:
    """Camera position (mm, patient-fixed frame) and orientation (degrees)."""

    x: float
    y: float
    z: float
    yaw: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        for v in (self.x, self.y, self.z, self.yaw, self.pitch):
            if not math.isfinite(v):
                raise InvariantViolation("pose coordinates must be finite")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))
        object.__setattr__(self, "pitch", normalize_angle(self.pitch))

    def distance_to(self, other: "Pose") -> float:
        return math.sqrt(
            (self.x - other.x) ** 2 + (self.y - other.y) ** 2 + (self.z - other.z) ** 2
        )


@dataclass(frozen=True)
class TaskDescriptor:
    """What the executor must do at a node.

    kind: Navigate | Detect | Treat | Verify.  Detect needs target_class
    and min_area; Treat needs target_class, spacing and max_iters; Verify
    needs target_class and residual_epsilon.
    """

    kind: str
    target_class: str | None = None
    min_area: int | None = None
    spacing: int | None = None
    max_iters: int | None = None
    residual_epsilon: int | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InvalidConfig(f"unknown task kind {self.kind!r}")
        if self.kind == "Navigate":
            return
        if not self.target_class:
            raise InvalidConfig(f"{self.kind} task needs a target_class")
        if self.kind == "Detect":
            if self.min_area is None or self.min_area < 1:
                raise InvalidConfig("Detect needs min_area >= 1")
        elif self.kind == "Treat":
            if self.spacing is None or self.spacing < 1:
                raise InvalidConfig("Treat needs spacing >= 1")
            if self.max_iters is None or self.max_iters < 1:
                raise InvalidConfig("Treat needs max_iters >= 1")
        elif self.kind == "Verify":
            if self.residual_epsilon is None or self.residual_epsilon < 0:
                raise InvalidConfig("Verify needs residual_epsilon >= 0")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for key in ("target_class", "min_area", "spacing", "max_iters", "residual_epsilon"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TaskDescriptor":
        allowed = {"kind", "target_class", "min_area", "spacing", "max_iters",
                   "residual_epsilon"}
        unknown = set(d) - allowed
        if unknown:
            raise MalformedFile(f"unknown task fields {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TreeNode:
    node_id: str
    pose: Pose
    situation: str
    task: TaskDescriptor

    def __post_init__(self):
        if not self.node_id:
            raise InvariantViolation("node_id must be non-empty")
        if not self.situation:
            raise InvariantViolation("situation must be non-empty")


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple


class SinaTree:
    """Immutable tree of camera poses."""

    def __init__(self, nodes, edges, root: str):
        node_list = list(nodes)
        ids = [n.node_id for n in node_list]
        if len(set(ids)) != len(ids):
            raise InvariantViolation("duplicate node ids")
        self._nodes = {n.node_id: n for n in node_list}
        norm_edges = set()
        for a, b in edges:
            if a == b:
                raise InvariantViolation(f"self-loop on {a!r}")
            if a not in self._nodes or b not in self._nodes:
                raise InvariantViolation(f"edge ({a!r}, {b!r}) references unknown node")
            norm_edges.add((min(a, b), max(a, b)))
        self._edges = norm_edges
        self.root = root
        self._adj = {nid: [] for nid in self._nodes}
        for a, b in sorted(self._edges):
            self._adj[a].append(b)
            self._adj[b].append(a)
        for nid in self._adj:
            self._adj[nid].sort()

    @property
    def nodes(self) -> dict:
        return dict(self._nodes)

    @property
    def edges(self) -> set:
        return set(self._edges)

    def node(self, node_id: str) -> TreeNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise NodeNotFound(f"no node {node_id!r}") from None

    def has_edge(self, a: str, b: str) -> bool:
        return (min(a, b), max(a, b)) in self._edges

    def node_ids(self):
        return sorted(self._nodes)

    def __eq__(self, other):
        if not isinstance(other, SinaTree):
            return NotImplemented
        return (
            self._nodes == other._nodes
            and self._edges == other._edges
            and self.root == other.root
        )


def validate(tree: SinaTree, registry=None) -> ValidationReport:
    """Structural validation, plus situation resolution when a registry
    is supplied.  Violations are reported, never raised."""
    violations = []
    n_nodes = len(tree.nodes)
    if n_nodes == 0:
        return ValidationReport(False, ("tree has no nodes",))
    if tree.root not in tree.nodes:
        violations.append(f"root {tree.root!r} is not a node")
    if len(tree.edges) != n_nodes - 1:
        violations.append(
            f"not acyclic/connected: {len(tree.edges)} edges for {n_nodes} nodes"
        )
    start = tree.root if tree.root in tree.nodes else next(iter(sorted(tree.nodes)))
    seen = {start}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for nxt in tree._adj[cur]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    if len(seen) != n_nodes:
        missing = sorted(set(tree.nodes) - seen)
        violations.append(f"not connected: unreachable nodes {missing}")
    if registry is not None:
        for nid in tree.node_ids():
            sit = tree.node(nid).situation
            if not registry.has(sit):
                violations.append(f"node {nid!r}: situation {sit!r} not registered")
    return ValidationReport(len(violations) == 0, tuple(violations))


def find_path(tree: SinaTree, src: str, dst: str) -> list:
    """The unique simple path between two nodes (inclusive)."""
    if src not in tree.nodes:
        raise NodeNotFound(f"no node {src!r}")
    if dst not in tree.nodes:
        raise NodeNotFound(f"no node {dst!r}")
    if src == dst:
        return [src]
    parent = {src: None}
    queue = deque([src])
    while queue:
        cur = queue.popleft()
        for nxt in tree._adj[cur]:
            if nxt not in parent:
                parent[nxt] = cur
                if nxt == dst:
                    queue.clear()
                    break
                queue.append(nxt)
    if dst not in parent:
        raise NodeNotFound(f"no path from {src!r} to {dst!r} (tree disconnected)")
    path = [dst]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    path.reverse()
    return path


def interpolate_pose(a: Pose, b: Pose, fraction: float) -> Pose:
    return Pose(
        x=a.x + fraction * (b.x - a.x),
        y=a.y + fraction * (b.y - a.y),
        z=a.z + fraction * (b.z - a.z),
        yaw=lerp_angle(a.yaw, b.yaw, fraction),
        pitch=lerp_angle(a.pitch, b.pitch, fraction),
    )


def insert_intermediate(tree: SinaTree, edge, fraction: float, situation: str,
                        task: TaskDescriptor, node_id: str | None = None) -> SinaTree:
    """Split an edge with a new waypoint node at the given fraction.

    The new pose interpolates linearly between the endpoints (angles along
    the shortest arc).  Returns a new tree; the original is untouched.
    """
    a, b = edge
    if not tree.has_edge(a, b):
        raise EdgeNotFound(f"no edge between {a!r} and {b!r}")
    if not 0.0 < fraction < 1.0:
        raise InvalidFraction(f"fraction must be in (0, 1), got {fraction}")
    if node_id is None:
        node_id = f"mid_{a}_{b}"
        k = 2
        while node_id in tree.nodes:
            node_id = f"mid_{a}_{b}_{k}"
            k += 1
    elif node_id in tree.nodes:
        raise InvariantViolation(f"node id {node_id!r} already in tree")
    pose = interpolate_pose(tree.node(a).pose, tree.node(b).pose, fraction)
    new_node = TreeNode(node_id=node_id, pose=pose, situation=situation, task=task)
    nodes = list(tree.nodes.values()) + [new_node]
    edges = tree.edges
    edges.discard((min(a, b), max(a, b)))
    edges.add((min(a, node_id), max(a, node_id)))
    edges.add((min(node_id, b), max(node_id, b)))
    return SinaTree(nodes, edges, tree.root)


def nearest_node(tree: SinaTree, pose: Pose) -> str:
    """Node id minimizing Euclidean position distance; ties go to the
    lexicographically smallest id."""
    if not tree.nodes:
        raise NodeNotFound("tree is empty")
    best_id = None
    best_d = math.inf
    for nid in tree.node_ids():
        d = tree.node(nid).pose.distance_to(pose)
        if d < best_d:
            best_d = d
            best_id = nid
    return best_id


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def tree_to_dict(tree: SinaTree) -> dict:
    return {
        "version": 1,
        "root": tree.root,
        "nodes": [
            {
                "id": nid,
                "pose": {
                    "x": tree.node(nid).pose.x,
                    "y": tree.node(nid).pose.y,
                    "z": tree.node(nid).pose.z,
                    "yaw": tree.node(nid).pose.yaw,
                    "pitch": tree.node(nid).pose.pitch,
                },
                "situation": tree.node(nid).situation,
                "task": tree.node(nid).task.to_dict(),
            }
            for nid in tree.node_ids()
        ],
        "edges": [list(e) for e in sorted(tree.edges)],
    }


def tree_from_dict(d: dict) -> SinaTree:
    try:
        if d.get("version") != 1:
            raise MalformedFile(f"unsupported tree version {d.get('version')!r}")
        nodes = [
            TreeNode(
                node_id=nd["id"],
                pose=Pose(**nd["pose"]),
                situation=nd["situation"],
                task=TaskDescriptor.from_dict(nd["task"]),
            )
            for nd in d["nodes"]
        ]
        edges = [(e[0], e[1]) for e in d["edges"]]
        return SinaTree(nodes, edges, d["root"])
    except (KeyError, TypeError) as exc:
        raise MalformedFile(f"bad tree file: {exc}") from exc


def serialize_tree(tree: SinaTree) -> str:
    return json.dumps(tree_to_dict(tree), indent=2, sort_keys=True)


def deserialize_tree(text: str) -> SinaTree:
    try:
        return tree_from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"tree file is not valid JSON: {exc}") from exc
