"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import json
import time

import networkx as nx
import numpy as np
import pytest

from nahid.cli import run
from nahid.edgedet import EdgeMap, detect_edges
from nahid.executor import PhantomEnv, execute, load_plan
from nahid.phantom import (
    NoiseSpec,
    SceneSpec,
    augment_rotations,
    corrupt,
    dice,
    exact_edge_config,
    generate_scene,
    iou,
    macro_iou,
    true_boundary_edges,
)
from nahid.raster import (
    LabelImage,
    Rotation,
    argmax_labels,
    decode_pmap,
    encode_pmap,
    rotate_quarter,
)
from nahid.sinafuse import (
    partition_regions,
    refine,
    refine_with_edges,
    serialize_region_map,
    to_label_image,
)
from nahid.sinatree import SinaTree, find_path, insert_intermediate, validate

from conftest import SCENARIOS, random_gray, random_probmap
from test_sinafuse import canonical, flood_fill_oracle
from test_sinatree import as_nx, navigate, random_tree


def report(n, name):
    print(f"ACCEPTANCE {n} {name}: PASS")


def test_criterion_1_partition_matches_flood_fill_oracle():
    rng = np.random.default_rng(1001)
    t0 = time.perf_counter()
    matches = 0
    for _ in range(1000):
        mask = rng.random((16, 16)) < rng.uniform(0.15, 0.6)
        mine = partition_regions(EdgeMap.from_array(mask)).region_of
        oracle = flood_fill_oracle(mask)
        assert np.array_equal(canonical(mine), canonical(oracle))
        matches += 1
    elapsed = time.perf_counter() - t0
    assert matches == 1000
    assert elapsed < 5.0, f"took {elapsed:.2f}s"
    report(1, f"partition oracle equivalence (1000/1000 in {elapsed:.2f}s)")


def test_criterion_2_refinement_gain_on_50_phantom_scenes():
    raws, refineds = [], []
    for i in range(50):
        spec = SceneSpec(size=128, num_regions=3 + i % 3, lesion=True, seed=i)
        scene = generate_scene(spec)
        probs = corrupt(scene.truth, NoiseSpec("iid_flip", 0.1), seed=i + 1000)
        raw = macro_iou(argmax_labels(probs), scene.truth)
        # exact-edge setup: the calibrated detector must reproduce the
        # true boundaries, and refinement runs on those edges
        edges = detect_edges(scene.frame, exact_edge_config())
        assert np.array_equal(edges.data, true_boundary_edges(scene.truth).data)
        refined = macro_iou(to_label_image(refine_with_edges(edges, probs)), scene.truth)
        assert refined > raw, f"scene {i}: no gain ({refined:.4f} <= {raw:.4f})"
        assert raw < 0.95, f"scene {i}: raw too clean ({raw:.4f})"
        raws.append(raw)
        refineds.append(refined)
    mean_refined = float(np.mean(refineds))
    assert mean_refined >= 0.999, f"mean refined macro-IoU {mean_refined:.6f}"
    report(2, f"refinement gain (mean refined {mean_refined:.6f}, "
              f"mean raw {np.mean(raws):.4f})")


def test_criterion_3_latency_budget(tmp_path):
    outcome = run(["bench", "refine", "--size", "128", "--classes", "5",
                   "--runs", "100", "--seed", "11", "--out", str(tmp_path)])
    assert outcome.exit_code == 0
    summary = json.loads((tmp_path / "bench.json").read_text())
    assert summary["median_ms"] < 40.0, summary
    report(3, f"latency budget (median {summary['median_ms']:.2f} ms < 40 ms)")


def test_criterion_4_parallel_determinism():
    rng = np.random.default_rng(1004)
    for trial in range(20):
        frame = random_gray(rng, 64, 64)
        probs = random_probmap(rng, 64, 64, 4)
        blobs = {serialize_region_map(refine(frame, probs, workers=w))
                 for w in (1, 2, 8)}
        assert len(blobs) == 1, f"trial {trial} diverged across worker counts"
    report(4, "parallel determinism (20 inputs, workers 1/2/8)")


def test_criterion_5_end_to_end_scenario():
    plan = load_plan(SCENARIOS / "scenario_ovary.json")
    env = PhantomEnv.from_spec(plan.environment)
    true_lesion = env.lesion_mask()
    assert int(true_lesion.sum()) == 60

    log = execute(plan, env)
    assert log.terminal == "COMPLETE"
    assert log.events_of("VERIFY_RESULT")[-1].payload["area"] == 0
    fires = log.events_of("TREAT_FIRE")
    assert fires
    for ev in fires:
        for x, y in ev.payload["targets"]:
            assert true_lesion[y, x], f"target ({x},{y}) outside the lesion"

    again = execute(plan, PhantomEnv.from_spec(plan.environment))
    assert again.to_jsonl() == log.to_jsonl()
    report(5, "end-to-end scenario (COMPLETE, verify 0, targets in lesion, "
              "byte-identical logs)")


def test_criterion_6_rollback_soundness():
    plan = load_plan(SCENARIOS / "scenario_ovary.json")
    plan.registry = plan.registry.without("left_ovary_focus")
    log = execute(plan, PhantomEnv.from_spec(plan.environment))
    assert log.terminal == "ABORT"
    forward = plan.state_order
    rollback = [ev.node_id for ev in log.events_of("ROLLBACK")]
    assert rollback == list(reversed(forward))
    report(6, f"rollback soundness (sequence {rollback})")


def test_criterion_7_tree_properties():
    rng = np.random.default_rng(1007)
    for _ in range(500):
        n = int(rng.integers(2, 51))
        tree = random_tree(rng, n)
        a = f"n{int(rng.integers(0, n))}"
        b = f"n{int(rng.integers(0, n))}"
        path = find_path(tree, a, b)
        g = as_nx(tree)
        assert path == nx.shortest_path(g, a, b)
        if a != b:
            assert len(list(nx.all_simple_paths(g, a, b))) == 1
        edge = sorted(tree.edges)[int(rng.integers(0, len(tree.edges)))]
        grown = insert_intermediate(tree, edge, 0.5, "s", navigate())
        assert len(grown.edges) == len(grown.nodes) - 1
        assert validate(grown).ok
    rejected = 0
    for _ in range(100):
        n = int(rng.integers(3, 30))
        tree = random_tree(rng, n)
        ids = sorted(tree.nodes)
        while True:
            x, y = rng.choice(len(ids), size=2, replace=False)
            x, y = ids[int(x)], ids[int(y)]
            if not tree.has_edge(x, y):
                break
        cyclic = SinaTree(tree.nodes.values(), list(tree.edges) + [(x, y)], tree.root)
        if not validate(cyclic).ok:
            rejected += 1
    assert rejected == 100
    report(7, "tree properties (500 path oracles, 100 cyclized graphs rejected)")


def test_criterion_8_rotation_augmentation():
    rng = np.random.default_rng(1008)
    dataset = []
    for _ in range(7):
        h, w = (int(v) for v in rng.integers(4, 20, size=2))
        frame = random_gray(rng, h, w)
        truth = LabelImage.from_array(rng.integers(0, 3, size=(h, w)), num_classes=3)
        dataset.append((frame, truth))
    out = augment_rotations(dataset)
    assert len(out) == 4 * len(dataset)
    for frame, truth in out:
        rf, rt = frame, truth
        for _ in range(4):
            rf = rotate_quarter(rf, Rotation(1))
            rt = rotate_quarter(rt, Rotation(1))
        assert rf == frame and rt == truth
    report(8, f"augmentation ({len(dataset)} pairs -> {len(out)}, rot90^4 = id)")


def test_criterion_9_pmap_codec_exactness():
    rng = np.random.default_rng(1009)
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 24, size=2))
        c = int(rng.integers(1, 7))
        if c == 1:
            p = random_probmap(rng, h, w, 2)  # then strip to sigmoid channel
            from nahid.raster import ProbMap
            p = ProbMap.from_array(p.data[:, :, :1])
        else:
            p = random_probmap(rng, h, w, c)
        blob = encode_pmap(p)
        again = decode_pmap(blob)
        assert again.data.tobytes() == p.data.tobytes()
        with pytest.raises(Exception):
            decode_pmap(blob[:-1])
    report(9, "pmap codec (200 bit-exact round trips, truncations rejected)")


def test_criterion_10_metric_checks():
    a = np.zeros((3, 3), dtype=bool)
    a[0:2, 0:2] = True
    b = np.zeros((3, 3), dtype=bool)
    b[0:2, 1:3] = True
    assert iou(a, b) == 1 / 3
    assert dice(a, b) == 1 / 2
    empty = np.zeros((4, 4), dtype=bool)
    assert iou(empty, empty) == 1.0
    assert dice(empty, empty) == 1.0
    rng = np.random.default_rng(1010)
    for _ in range(1000):
        m1 = rng.random((8, 8)) < rng.uniform(0, 1)
        m2 = rng.random((8, 8)) < rng.uniform(0, 1)
        assert dice(m1, m2) >= iou(m1, m2)
    report(10, "metric checks (1/3 and 1/2 exact, empty=1.0, dice >= iou x1000)")
