"""Figures written next to the CSV reports.  Headless (Agg) only."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "svg.hashsalt": "normq",
}

default_colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]


def figsize(scale: float = 1.0) -> tuple[float, float]:
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    width = 5.5 * scale
    return width, width * golden


def new(nrows: int = 1, ncols: int = 1, scale: float = 1.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows, ncols, figsize=figsize(scale), constrained_layout=True)
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def lld_curve(record, path, title: str = "EM likelihood"):
    """Training (and held-out, if recorded) LLD per step; quantization events dashed."""
    steps = record.column("step")
    fig, ax = new()
    ax.plot(steps, record.column("train_lld"), color=default_colors[0], lw=1.2, label="train")
    test = record.column("test_lld")
    if not all(math.isnan(v) for v in test):
        ax.plot(steps, test, color=default_colors[1], lw=1.2, label="held-out")
    for s in record.event_steps:
        ax.axvline(s, color="0.6", ls="--", lw=0.6)
    ax.set_xlabel("EM step")
    ax.set_ylabel("mean log-likelihood per sequence")
    ax.set_title(title)
    ax.legend(loc="lower right")
    return save(fig, path)


def sparsity_vs_bits(bits: Sequence[int], table: dict, path):
    fig, ax = new()
    for i, (name, vals) in enumerate(table.items()):
        ax.plot(bits, [100 * v for v in vals], marker="o", ms=3, color=default_colors[i], label=name)
    ax.set_xlabel("bit width")
    ax.set_ylabel("zero ratio (%)")
    ax.set_title("Auto-pruning of fixed-point linear quantization")
    ax.invert_xaxis()
    ax.legend()
    return save(fig, path)


def interval_sweep(rows: Sequence[dict], path):
    """Final held-out LLD against quantization interval, one line per bit width."""
    fig, ax = new()
    by_bits: dict[int, list] = {}
    for r in rows:
        by_bits.setdefault(int(r["bits"]), []).append((int(r["interval"]), float(r["final_test_lld"])))
    for i, (b, pts) in enumerate(sorted(by_bits.items())):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3,
                color=default_colors[i], label=f"{b} bit")
    ax.set_xscale("log")
    ax.set_xlabel("quantization interval (EM steps)")
    ax.set_ylabel("final held-out LLD")
    ax.legend()
    return save(fig, path)


def success_bars(labels: Sequence[str], guided: Sequence[float], unguided: Sequence[float], path):
    fig, ax = new()
    x = range(len(labels))
    w = 0.38
    ax.bar([i - w / 2 for i in x], [100 * g for g in guided], w, label="guided", color=default_colors[0])
    ax.bar([i + w / 2 for i in x], [100 * u for u in unguided], w, label="unguided", color=default_colors[1])
    ax.set_xticks(list(x), labels)
    ax.set_ylabel("constraint success rate (%)")
    ax.set_ylim(0, 105)
    ax.legend()
    return save(fig, path)
