"""Figure rendering; every report path draws to files next to its data.

All functions are headless (Agg) and return the path they wrote.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return out_path


def render_keyness_heatmap(
    values: np.ndarray,
    channel_names: Sequence[str],
    channel_indices: Sequence[int],
    k_time: np.ndarray,
    out_path: str | Path,
    baseline_values: np.ndarray | None = None,
    title: str = "",
) -> Path:
    """Line plots over a keyness-intensity background, one axis per channel.

    The solid line is the sample; a dashed line overlays the healthy baseline
    when one is given.
    """
    n = len(channel_indices)
    L = values.shape[0]
    fig, axes = plt.subplots(n, 1, figsize=(9, 1.5 * n + 0.8), sharex=True, squeeze=False)
    strip = k_time[None, :]
    for row, (name, idx) in enumerate(zip(channel_names, channel_indices)):
        ax = axes[row, 0]
        series = values[:, idx]
        lo, hi = float(series.min()), float(series.max())
        if baseline_values is not None:
            lo = min(lo, float(baseline_values[:, idx].min()))
            hi = max(hi, float(baseline_values[:, idx].max()))
        margin = 0.05 * (hi - lo) if hi > lo else 1.0
        ax.imshow(
            strip,
            aspect="auto",
            extent=(0, L, lo - margin, hi + margin),
            origin="lower",
            cmap="inferno",
            vmin=0.5,
            vmax=1.0,
            alpha=0.45,
        )
        if baseline_values is not None:
            ax.plot(baseline_values[:, idx], color="tab:green", lw=0.9, ls="--", label="baseline")
        ax.plot(series, color="tab:blue", lw=1.0, label="sample")
        ax.set_ylabel(name, fontsize=8)
        ax.set_ylim(lo - margin, hi + margin)
        ax.set_xlim(0, L)
        if row == 0:
            ax.legend(loc="upper right", fontsize=7)
    axes[-1, 0].set_xlabel("timestep")
    if title:
        fig.suptitle(title, fontsize=10)
    return _finish(fig, out_path)


def render_confusion_matrix(
    counts: np.ndarray, class_names: Sequence[str], out_path: str | Path, title: str = ""
) -> Path:
    counts = np.asarray(counts)
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(class_names), 0.9 + 0.6 * len(class_names)))
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(class_names)), class_names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    thresh = counts.max() / 2 if counts.size else 0
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            ax.text(
                j,
                i,
                str(int(counts[i, j])),
                ha="center",
                va="center",
                fontsize=8,
                color="white" if counts[i, j] > thresh else "black",
            )
    fig.colorbar(im, ax=ax, shrink=0.8)
    if title:
        ax.set_title(title, fontsize=10)
    return _finish(fig, out_path)


def render_per_class_bars(
    per_class: Mapping[str, Mapping[str, float]], out_path: str | Path, title: str = ""
) -> Path:
    names = list(per_class)
    f1 = [per_class[n]["f1"] for n in names]
    recall = [per_class[n]["recall"] for n in names]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.5 + 0.8 * len(names), 3.2))
    ax.bar(x - 0.2, f1, width=0.4, label="F1")
    ax.bar(x + 0.2, recall, width=0.4, label="recall")
    ax.set_xticks(x, names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    if title:
        ax.set_title(title, fontsize=10)
    return _finish(fig, out_path)


STABILITY_COLORS = {
    "always_correct": "tab:green",
    "generally_correct": "tab:blue",
    "frequently_misclassified": "gold",
    "always_misclassified": "tab:red",
}


def render_stability(counts: Mapping[str, int], out_path: str | Path, title: str = "") -> Path:
    names = list(counts)
    values = [counts[n] for n in names]
    colors = [STABILITY_COLORS.get(n, "gray") for n in names]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    bars = ax.bar(range(len(names)), values, color=colors)
    ax.set_xticks(range(len(names)), [n.replace("_", "\n") for n in names], fontsize=8)
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, v, str(v), ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("flights")
    if title:
        ax.set_title(title, fontsize=10)
    return _finish(fig, out_path)


def render_cv_summary(
    aggregate: Mapping[str, Mapping[str, float]], out_path: str | Path, title: str = ""
) -> Path:
    """Bar chart of mean +/- std per metric across folds."""
    names = list(aggregate)
    means = [aggregate[n]["mean"] for n in names]
    stds = [aggregate[n]["std"] for n in names]
    fig, ax = plt.subplots(figsize=(1.5 + 0.9 * len(names), 3.2))
    ax.bar(range(len(names)), means, yerr=stds, capsize=4, color="tab:purple", alpha=0.8)
    ax.set_xticks(range(len(names)), names, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.grid(axis="y", alpha=0.3)
    if title:
        ax.set_title(title, fontsize=10)
    return _finish(fig, out_path)
