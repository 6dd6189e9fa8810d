"""Matplotlib figure rendering for CLI reports.

Figures are written next to the delimited output of the reporting
commands; rendering is headless (Agg) and never pops a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_eval_figures(rows, out_dir) -> list:
    """Refinement-gain report figures.

    ``rows`` holds one dict per scene with raw_macro_iou and
    refined_macro_iou.  Writes a raw-vs-refined scatter and a gain
    histogram; returns the written paths.
    """
    out = Path(out_dir)
    raw = [r["raw_macro_iou"] for r in rows]
    refined = [r["refined_macro_iou"] for r in rows]
    gains = [b - a for a, b in zip(raw, refined)]

    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    ax.scatter(raw, refined, s=18, alpha=0.8, edgecolors="none")
    lo = min(min(raw), min(refined)) - 0.02
    ax.plot([lo, 1.0], [lo, 1.0], ls="--", lw=1, color="gray", label="no change")
    ax.set_xlabel("macro-IoU of raw winning-class labels")
    ax.set_ylabel("macro-IoU after edge-guided refinement")
    ax.set_title(f"Refinement gain over {len(rows)} phantom scenes")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    scatter_path = out / "report_scatter.png"
    fig.savefig(scatter_path, dpi=150)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.hist(gains, bins=20, color="#2c7fb8", edgecolor="white")
    ax.set_xlabel("macro-IoU gain (refined - raw)")
    ax.set_ylabel("scenes")
    ax.set_title("Distribution of refinement gain")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    hist_path = out / "report_gain_hist.png"
    fig.savefig(hist_path, dpi=150)
    plt.close(fig)

    return [scatter_path, hist_path]


def render_bench_figure(samples_ms, median_ms: float, budget_ms: float, out_dir) -> Path:
    """Latency histogram with the median and the budget marked."""
    out = Path(out_dir)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.hist(samples_ms, bins=25, color="#41ab5d", edgecolor="white")
    ax.axvline(median_ms, color="black", lw=1.5, label=f"median {median_ms:.2f} ms")
    ax.axvline(budget_ms, color="red", ls="--", lw=1.2, label=f"budget {budget_ms:.0f} ms")
    ax.set_xlabel("refine latency (ms)")
    ax.set_ylabel("runs")
    ax.set_title(f"Single-threaded refine latency ({len(samples_ms)} runs)")
    ax.legend()
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    path = out / "bench_latency.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
