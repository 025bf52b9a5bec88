"""Report figures written straight to PNG files (Agg canvas, no pyplot state)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .ingest import SIGNAL_NAMES

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}
SIGNAL_UNITS = ("km/h", "km/h/s", "km/h/s²", "deg", "deg/s", "deg/s²")


def _figure(width=6.0, height=3.6, nrows=1, ncols=1):
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(width, height))
        FigureCanvasAgg(fig)
        axes = fig.subplots(nrows, ncols, squeeze=False)
    return fig, axes


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    return path


def plot_fold_scores(report, path: str | Path, title: str = "") -> Path:
    """Per-fold top-1/top-3 with the mean and its 95% CI band."""
    fig, axes = _figure()
    ax = axes[0, 0]
    x = np.arange(len(report.folds))
    for attr, mean, ci, color in (
        ("top1", report.top1_mean, report.top1_ci, "tab:blue"),
        ("top3", report.top3_mean, report.top3_ci, "tab:orange"),
    ):
        vals = [getattr(f, attr) for f in report.folds]
        ax.plot(x, vals, "o", color=color, ms=4, label=f"{attr} {mean:.3f} ± {ci:.3f}")
        ax.axhline(mean, color=color, lw=1)
        ax.axhspan(mean - ci, mean + ci, color=color, alpha=0.15)
    ax.set_xticks(x)
    ax.set_xticklabels([f"{f.repeat}.{f.fold}" for f in report.folds], rotation=90, fontsize=6)
    ax.set_xlabel("repeat.fold")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_sweep(results: Sequence, path: str | Path, param: str = "") -> Path:
    """Mean accuracy per grid point with CI error bars."""
    fig, axes = _figure()
    ax = axes[0, 0]
    labels = [lab.split("=", 1)[-1] for lab, _ in results]
    x = np.arange(len(results))
    for attr, color in (("top1", "tab:blue"), ("top3", "tab:orange")):
        means = [getattr(r, f"{attr}_mean") for _, r in results]
        cis = [getattr(r, f"{attr}_ci") for _, r in results]
        ax.errorbar(x, means, yerr=cis, marker="o", ms=4, capsize=3, color=color, label=attr)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=45 if len(labels) > 8 else 0)
    ax.set_xlabel(param or "grid point")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend()
    return _save(fig, path)


def plot_signal_histograms(trips, path: str | Path, bins: int = 40) -> Path:
    """One histogram per kinematic signal, pooled over every point."""
    pts = np.concatenate([t.points for t in trips], axis=0)
    fig, axes = _figure(9.0, 5.0, 2, 3)
    for k, ax in enumerate(axes.ravel()):
        ax.hist(pts[:, k], bins=bins, color="tab:gray", edgecolor="white", lw=0.3)
        ax.set_title(SIGNAL_NAMES[k])
        ax.set_xlabel(SIGNAL_UNITS[k])
    return _save(fig, path)


def plot_history(history: Sequence[dict], path: str | Path) -> Path:
    """Training and validation losses over iterations."""
    fig, axes = _figure(7.0, 3.2, 1, 2)
    it = [h["iteration"] for h in history]
    ax = axes[0, 0]
    ax.plot(it, [h["loss_u"] for h in history], label="train L_u")
    ax.plot(it, [h["val_u"] for h in history], label="val L_u")
    ax.plot(it, [h["val_c"] for h in history], "--", label="val L_c")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    ax = axes[0, 1]
    ax.plot(it, [h["train_top1"] for h in history], label="train")
    ax.plot(it, [h["val_top1"] for h in history], label="validation")
    ax.set_xlabel("iteration")
    ax.set_ylabel("top-1")
    ax.legend()
    ax.set_ylim(0, 1.02)
    return _save(fig, path)
