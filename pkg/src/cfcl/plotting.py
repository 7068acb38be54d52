"""Figures rendered next to the CSV outputs (matplotlib, headless)."""
from __future__ import annotations

import os
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_accuracy(curves: Dict[str, List[dict]], path: str, x: str = "t") -> str:
    """Accuracy against ``x`` (time step or a cumulative cost column), one line per label."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in sorted(curves.items()):
        ax.plot([r[x] for r in rows], [r["accuracy"] for r in rows], label=label)
    ax.set_xlabel(x)
    ax.set_ylabel("linear-probe accuracy")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_alignment(M: np.ndarray, path: str, title: str = "") -> str:
    """Heatmap of mean pairwise embedding distance between classes."""
    M = np.asarray(M)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(M, cmap="viridis")
    fig.colorbar(im, ax=ax)
    ax.set_xticks(range(len(M)))
    ax.set_yticks(range(len(M)))
    ax.set_xlabel("class")
    ax.set_ylabel("class")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_cost_to_threshold(summary: Sequence[dict], path: str,
                           cost: str = "d2d_bytes") -> str:
    """Grouped bars of the cost needed to reach each accuracy threshold; unreached marked ``x``."""
    modes = sorted({r["mode"] for r in summary})
    thresholds = sorted({r["threshold"] for r in summary})
    width = 0.8 / max(len(modes), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, mode in enumerate(modes):
        xs, ys, miss = [], [], []
        for n, th in enumerate(thresholds):
            vals = [r[cost] for r in summary if r["mode"] == mode and r["threshold"] == th]
            reached = [v for v in vals if v is not None]
            pos = n + (k - (len(modes) - 1) / 2) * width
            if reached and len(reached) * 2 > len(vals):
                xs.append(pos)
                ys.append(float(np.median(reached)))
            else:
                miss.append(pos)
        ax.bar(xs, ys, width=width, label=mode)
        ax.scatter(miss, [0] * len(miss), marker="x", color="k")
    ax.set_xticks(range(len(thresholds)))
    ax.set_xticklabels([str(t) for t in thresholds])
    ax.set_xlabel("accuracy threshold")
    ax.set_ylabel(f"median {cost} to reach")
    ax.legend(fontsize=8)
    return _save(fig, path)
