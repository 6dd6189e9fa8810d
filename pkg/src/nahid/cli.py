"""Command-line surface.

Subcommands::

    refine            frame + .pmap -> refined region map + overlay image
    tree validate     structural (and registry) checks on a tree file
    tree path         print the unique path between two nodes
    tree insert       split an edge with an interpolated waypoint
    phantom generate  write a synthetic scene bundle
    phantom corrupt   write a noisy .pmap for a scene's ground truth
    eval iou          IoU between two mask images
    eval report       refinement-gain report (CSV + figures)
    surgery run       execute a plan against its phantom environment
    bench refine      single-threaded latency report (CSV + figure)

Exit codes: 0 success, 1 domain failure, 2 usage error.  Commands only
write below their ``--out`` directory.  ``NAHID_CONFIG`` may point to a
JSON file with default edge-detector settings and worker count.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .edgedet import EdgeDetectorConfig
from .errors import NahidError, SizeMismatch
from .executor import PhantomEnv, execute, load_plan
from .figures import render_bench_figure, render_eval_figures
from .phantom import (
    NoiseSpec,
    SceneSpec,
    corrupt,
    exact_edge_config,
    generate_scene,
    load_scene,
    macro_iou,
    save_scene,
)
from .raster import (
    GrayImage,
    argmax_labels,
    decode_image,
    decode_pmap,
    encode_pgm,
    encode_pmap,
)
from .segbackend import load_registry
from .sinafuse import refine, region_table, to_label_image
from .sinatree import (
    TaskDescriptor,
    deserialize_tree,
    find_path,
    insert_intermediate,
    serialize_tree,
    validate,
)

LATENCY_BUDGET_MS = 40.0


@dataclass
class CommandOutcome:
    exit_code: int
    artifacts: list = field(default_factory=list)


def _load_defaults() -> dict:
    path = os.environ.get("NAHID_CONFIG")
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise NahidError(f"cannot read NAHID_CONFIG {path!r}: {exc}") from exc


def _edge_config(args, defaults: dict) -> EdgeDetectorConfig:
    base = dict(defaults.get("edge", {}))
    for flag, key in (("low", "low_threshold"), ("high", "high_threshold"),
                      ("blur", "blur_radius")):
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    return EdgeDetectorConfig(**base)


def _workers(args, defaults: dict) -> int:
    if getattr(args, "workers", None) is not None:
        return args.workers
    return int(defaults.get("workers", 1))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_frame(path) -> GrayImage:
    return decode_image(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_refine(args, defaults) -> CommandOutcome:
    frame = _read_frame(args.frame)
    probs = decode_pmap(Path(args.pmap).read_bytes())
    cfg = _edge_config(args, defaults)
    rm = refine(frame, probs, cfg, workers=_workers(args, defaults))
    out = _out_dir(args)

    labels = to_label_image(rm)
    labels_path = out / "labels.pgm"
    labels_path.write_bytes(encode_pgm(GrayImage.from_array(labels.data.astype(np.uint8))))

    table_path = out / "regions.json"
    table_path.write_text(json.dumps(region_table(rm), indent=2, sort_keys=True))

    # overlay: region boundaries drawn white over the input frame
    boundaries = np.zeros(rm.region_of.shape, dtype=bool)
    boundaries[:, :-1] |= rm.region_of[:, :-1] != rm.region_of[:, 1:]
    boundaries[:-1, :] |= rm.region_of[:-1, :] != rm.region_of[1:, :]
    overlay = frame.data.copy()
    overlay[boundaries] = 255
    overlay_path = out / "overlay.pgm"
    overlay_path.write_bytes(encode_pgm(GrayImage.from_array(overlay)))

    print(f"refined {frame.width}x{frame.height}: {rm.num_regions} regions")
    return CommandOutcome(0, [labels_path, table_path, overlay_path])


def _cmd_tree_validate(args, defaults) -> CommandOutcome:
    tree = deserialize_tree(Path(args.tree).read_text())
    registry = load_registry(args.registry) if args.registry else None
    report = validate(tree, registry)
    if report.ok:
        print("ok")
        return CommandOutcome(0)
    for v in report.violations:
        print(f"violation: {v}")
    return CommandOutcome(1)


def _cmd_tree_path(args, defaults) -> CommandOutcome:
    tree = deserialize_tree(Path(args.tree).read_text())
    for nid in find_path(tree, getattr(args, "from"), args.to):
        print(nid)
    return CommandOutcome(0)


def _cmd_tree_insert(args, defaults) -> CommandOutcome:
    tree = deserialize_tree(Path(args.tree).read_text())
    a, _, b = args.edge.partition(",")
    if not a or not b:
        raise NahidError(f"--edge must be 'a,b', got {args.edge!r}")
    task = TaskDescriptor.from_dict(json.loads(args.task))
    new_tree = insert_intermediate(tree, (a.strip(), b.strip()), args.fraction,
                                   args.situation, task, node_id=args.id)
    out = _out_dir(args)
    path = out / "tree.json"
    path.write_text(serialize_tree(new_tree))
    print(f"inserted waypoint; tree now has {len(new_tree.nodes)} nodes")
    return CommandOutcome(0, [path])


def _cmd_phantom_generate(args, defaults) -> CommandOutcome:
    spec = SceneSpec(size=args.size, num_regions=args.regions, lesion=args.lesion,
                     seed=args.seed, lesion_area=args.lesion_area)
    scene = generate_scene(spec)
    paths = save_scene(scene, _out_dir(args))
    lesion_px = int((scene.truth.data == scene.lesion_class).sum())
    print(f"scene {args.size}x{args.size}, {args.regions} regions, "
          f"lesion {lesion_px} px, seed {args.seed}")
    return CommandOutcome(0, paths)


def _cmd_phantom_corrupt(args, defaults) -> CommandOutcome:
    scene = load_scene(args.scene)
    noise = NoiseSpec(mode=args.mode, p=args.p, band=args.band)
    pmap = corrupt(scene.truth, noise, args.seed)
    out = _out_dir(args)
    path = out / "probs.pmap"
    path.write_bytes(encode_pmap(pmap))
    print(f"corrupted map written ({args.mode}, p={args.p}, seed {args.seed})")
    return CommandOutcome(0, [path])


def _mask_from_image(path, class_id) -> np.ndarray:
    img = _read_frame(path)
    if class_id is None:
        return img.data != 0
    return img.data == class_id


def _cmd_eval_iou(args, defaults) -> CommandOutcome:
    from .phantom import iou as iou_fn

    a = _mask_from_image(args.pred, args.class_id)
    b = _mask_from_image(args.truth, args.class_id)
    print(f"{iou_fn(a, b):.6f}")
    return CommandOutcome(0)


def _cmd_eval_report(args, defaults) -> CommandOutcome:
    out = _out_dir(args)
    workers = _workers(args, defaults)
    rows = []
    for i in range(args.scenes):
        seed = args.seed + i
        spec = SceneSpec(size=args.size, num_regions=3 + i % 3, lesion=True, seed=seed)
        scene = generate_scene(spec)
        probs = corrupt(scene.truth, NoiseSpec("iid_flip", args.noise_p), seed=seed + 1000)
        raw = macro_iou(argmax_labels(probs), scene.truth)
        rm = refine(scene.frame, probs, exact_edge_config(), workers=workers)
        refined = macro_iou(to_label_image(rm), scene.truth)
        rows.append({
            "scene": i,
            "seed": seed,
            "num_regions": spec.num_regions,
            "raw_macro_iou": round(raw, 6),
            "refined_macro_iou": round(refined, 6),
            "gain": round(refined - raw, 6),
        })

    csv_path = out / "report.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    mean_raw = sum(r["raw_macro_iou"] for r in rows) / len(rows)
    mean_refined = sum(r["refined_macro_iou"] for r in rows) / len(rows)
    summary = {
        "scenes": args.scenes,
        "size": args.size,
        "noise_p": args.noise_p,
        "seed": args.seed,
        "mean_raw_macro_iou": round(mean_raw, 6),
        "mean_refined_macro_iou": round(mean_refined, 6),
        "min_refined_macro_iou": min(r["refined_macro_iou"] for r in rows),
        "refined_beats_raw_everywhere": all(
            r["refined_macro_iou"] > r["raw_macro_iou"] for r in rows
        ),
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True))

    figure_paths = render_eval_figures(rows, out)
    print(f"mean macro-IoU raw {mean_raw:.4f} -> refined {mean_refined:.6f} "
          f"over {args.scenes} scenes")
    return CommandOutcome(0, [csv_path, summary_path, *figure_paths])


def _cmd_surgery_run(args, defaults) -> CommandOutcome:
    plan = load_plan(args.plan)
    if plan.environment is None:
        raise NahidError("plan carries no environment section; nothing to simulate")
    env = PhantomEnv.from_spec(plan.environment, seed=args.seed)
    log = execute(plan, env, workers=_workers(args, defaults))
    out = _out_dir(args)
    log_path = out / "actionlog.jsonl"
    log_path.write_text(log.to_jsonl())
    terminal = log.terminal
    print(f"{terminal}: {len(log.events)} events, seed {env.seed}")
    return CommandOutcome(0 if terminal == "COMPLETE" else 1, [log_path])


def _cmd_bench_refine(args, defaults) -> CommandOutcome:
    if args.classes < 3 or args.classes > 7:
        raise NahidError("bench supports 3..7 classes (regions + lesion)")
    spec = SceneSpec(size=args.size, num_regions=args.classes - 1, lesion=True,
                     seed=args.seed)
    scene = generate_scene(spec)
    probs = corrupt(scene.truth, NoiseSpec("iid_flip", 0.1), seed=args.seed + 1)
    cfg = _edge_config(args, defaults)

    for _ in range(5):  # warmup
        refine(scene.frame, probs, cfg, workers=1)
    samples = []
    for _ in range(args.runs):
        t0 = time.perf_counter()
        refine(scene.frame, probs, cfg, workers=1)
        samples.append((time.perf_counter() - t0) * 1000.0)
    median_ms = statistics.median(samples)

    out = _out_dir(args)
    csv_path = out / "bench.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "millis"])
        for i, ms in enumerate(samples):
            writer.writerow([i, f"{ms:.4f}"])
    summary = {
        "size": args.size,
        "classes": args.classes,
        "runs": args.runs,
        "seed": args.seed,
        "median_ms": round(median_ms, 4),
        "p10_ms": round(sorted(samples)[len(samples) // 10], 4),
        "p90_ms": round(sorted(samples)[(len(samples) * 9) // 10], 4),
        "budget_ms": LATENCY_BUDGET_MS,
        "within_budget": median_ms < LATENCY_BUDGET_MS,
    }
    json_path = out / "bench.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    fig_path = render_bench_figure(samples, median_ms, LATENCY_BUDGET_MS, out)
    print(f"median {median_ms:.2f} ms over {args.runs} runs "
          f"({args.size}x{args.size}, {args.classes} classes)")
    return CommandOutcome(0 if median_ms < LATENCY_BUDGET_MS else 1,
                          [csv_path, json_path, fig_path])


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_edge_flags(p):
    p.add_argument("--low", type=float, default=None, help="low gradient threshold")
    p.add_argument("--high", type=float, default=None, help="high gradient threshold")
    p.add_argument("--blur", type=int, default=None, help="box pre-blur radius (0 = off)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nahid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nahid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("refine", help="refine a frame's probability map with edges")
    p.add_argument("--frame", required=True, help="PGM/PNG camera frame")
    p.add_argument("--pmap", required=True, help=".pmap probability map")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    _add_edge_flags(p)
    p.set_defaults(func=_cmd_refine)

    tree = sub.add_parser("tree", help="camera-pose tree operations")
    tree_sub = tree.add_subparsers(dest="tree_command", required=True)

    p = tree_sub.add_parser("validate")
    p.add_argument("--tree", required=True)
    p.add_argument("--registry", default=None)
    p.set_defaults(func=_cmd_tree_validate)

    p = tree_sub.add_parser("path")
    p.add_argument("--tree", required=True)
    p.add_argument("--from", required=True)
    p.add_argument("--to", required=True)
    p.set_defaults(func=_cmd_tree_path)

    p = tree_sub.add_parser("insert")
    p.add_argument("--tree", required=True)
    p.add_argument("--edge", required=True, help="edge as 'a,b'")
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--situation", required=True)
    p.add_argument("--task", required=True, help='task JSON, e.g. {"kind":"Navigate"}')
    p.add_argument("--id", default=None, help="id for the new node")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_tree_insert)

    ph = sub.add_parser("phantom", help="synthetic scene tools")
    ph_sub = ph.add_subparsers(dest="phantom_command", required=True)

    p = ph_sub.add_parser("generate")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--regions", type=int, default=4)
    p.add_argument("--lesion", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--lesion-area", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_phantom_generate)

    p = ph_sub.add_parser("corrupt")
    p.add_argument("--scene", required=True, help="scene bundle directory")
    p.add_argument("--mode", choices=["iid_flip", "boundary_band"], default="iid_flip")
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--band", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_phantom_corrupt)

    ev = sub.add_parser("eval", help="metrics and reports")
    ev_sub = ev.add_subparsers(dest="eval_command", required=True)

    p = ev_sub.add_parser("iou")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--class-id", type=int, default=None,
                   help="select one class id (default: nonzero pixels)")
    p.set_defaults(func=_cmd_eval_iou)

    p = ev_sub.add_parser("report")
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--noise-p", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval_report)

    sg = sub.add_parser("surgery", help="plan execution")
    sg_sub = sg.add_subparsers(dest="surgery_command", required=True)

    p = sg_sub.add_parser("run")
    p.add_argument("--plan", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the environment seed from the plan")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_surgery_run)

    be = sub.add_parser("bench", help="performance measurements")
    be_sub = be.add_subparsers(dest="bench_command", required=True)

    p = be_sub.add_parser("refine")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--out", required=True)
    _add_edge_flags(p)
    p.set_defaults(func=_cmd_bench_refine)

    return parser


def run(argv) -> CommandOutcome:
    """Parse and execute one CLI invocation; never raises for usage or
    domain errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 2
        return CommandOutcome(code if code != 0 else 0)
    try:
        defaults = _load_defaults()
        return args.func(args, defaults)
    except SizeMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandOutcome(1)
    except NahidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandOutcome(1)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandOutcome(1)


def main() -> None:
    sys.exit(run(sys.argv[1:]).exit_code)


if __name__ == "__main__":
    main()
