"""Figures written next to CSV output (non-interactive Agg backend)."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .aggregator import WindowEstimate  # noqa: E402
from .harness import ExperimentResult  # noqa: E402


def figure_path(csv_path: str | Path, suffix: str = "") -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + suffix + ".png")


def plot_sweep(rows: Sequence[dict], path: str | Path) -> Path:
    """Seed-averaged loss (with spread) and the two privacy levels per value."""
    param = rows[0]["param"]
    vals = sorted({r["value"] for r in rows})
    loss = [[r["loss"] for r in rows if r["value"] == v] for v in vals]
    mean = np.array([np.mean(x) for x in loss])
    sd = np.array([np.std(x) for x in loss])
    first = {v: next(r for r in rows if r["value"] == v) for v in vals}

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.errorbar(vals, mean * 100, yerr=sd * 100, marker="o", capsize=3)
    ax1.set_xlabel(param)
    ax1.set_ylabel("accuracy loss (%)")
    ax1.grid(alpha=0.3)

    zk = np.array([first[v]["eps_zk"] for v in vals], dtype=float)
    dp = np.array([first[v]["eps_dp"] for v in vals], dtype=float)
    if np.isfinite(zk).any() or np.isfinite(dp).any():
        ax2.plot(vals, np.where(np.isfinite(zk), zk, np.nan), marker="s", label="eps_zk")
        ax2.plot(vals, np.where(np.isfinite(dp), dp, np.nan), marker="^", label="eps_dp")
        ax2.set_ylabel("privacy level")
        ax2.legend()
    else:
        ax2.text(0.5, 0.5, "no privacy (p = 1)", ha="center", va="center", transform=ax2.transAxes)
    ax2.set_xlabel(param)
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out


def plot_window(est: WindowEstimate, path: str | Path) -> Path:
    """Per-bucket histogram of one window with its error bars."""
    idx = [b.index for b in est.buckets]
    vals = [b.estimate for b in est.buckets]
    errs = [b.half_width if math.isfinite(b.half_width) else 0.0 for b in est.buckets]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(idx) + 2), 4))
    ax.bar(idx, vals, yerr=errs, capsize=3, color="tab:blue", alpha=0.8)
    label = "no-count" if est.inverted else "count"
    ax.set_xlabel("bucket")
    ax.set_ylabel(f"estimated {label}")
    ax.set_title(f"query {est.query_id}, window [{est.start_ms}, {est.end_ms}) ms, "
                 f"{est.participants} answers ({est.flags})", fontsize=9)
    ax.set_xticks(idx)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out


def plot_results(results: Sequence[ExperimentResult], path: str | Path) -> Path:
    """Estimate vs actual per window for every bucket of the first run."""
    first = [r for r in results if r.run == results[0].run]
    fig, ax = plt.subplots(figsize=(8, 4))
    for b in sorted({r.bucket for r in first}):
        rs = [r for r in first if r.bucket == b]
        x = [r.window_end_ms for r in rs]
        ax.errorbar(x, [r.estimate for r in rs],
                    yerr=[r.half_width if math.isfinite(r.half_width) else 0.0 for r in rs],
                    marker="o", ms=3, capsize=2, label=f"bucket {b}")
        ax.plot(x, [r.actual for r in rs], ls="--", color="gray", lw=1)
    ax.set_xlabel("window end (ms)")
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out
