"""Figures for the ``report`` subcommand.

Every function takes report data already loaded from disk and writes one PNG.
The Agg backend is forced so figures render without a display.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import SIMILARITY_METRICS  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_trend(aggregates, path, title=""):
    """Mean similarity against the sweep value for a smoothing-trend report."""
    values = aggregates["values"]
    by_value = aggregates["mean_by_value"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        x = np.arange(len(values))
        for metric in SIMILARITY_METRICS:
            ax.plot(x, [by_value[str(v)][metric] for v in values], marker="o", label=metric)
        guided = aggregates.get("guided_backprop")
        if guided:
            ax.axhline(guided["ssim"], color="gray", ls="--", lw=1, label="guided (ssim)")
        ax.set_xticks(x, [str(v) for v in values])
        ax.set_xlabel(aggregates["swept_field"])
        ax.set_ylabel("similarity to robust map")
        ax.set_title(title)
        ax.legend(fontsize=7)
        return _save(fig, path)


def plot_similarity_bars(similarity, path, title=""):
    """Grouped bars: mean similarity-to-reference per model and metric."""
    models = sorted(similarity)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        width = 0.8 / max(len(models), 1)
        x = np.arange(len(SIMILARITY_METRICS))
        for k, model_id in enumerate(models):
            vals = [similarity[model_id].get(m) or 0.0 for m in SIMILARITY_METRICS]
            ax.bar(x + k * width, vals, width, label=model_id)
        ax.set_xticks(x + width * (len(models) - 1) / 2, SIMILARITY_METRICS)
        ax.set_ylim(min(0.0, ax.get_ylim()[0]), 1.05)
        ax.set_ylabel("mean similarity to reference")
        ax.set_title(title)
        ax.legend(fontsize=7)
        return _save(fig, path)


def plot_global_std(entries, path):
    """Bars of global accuracy std, one group per experiment.

    ``entries`` maps experiment name to ``{metric: std}``.
    """
    names = sorted(entries)
    metrics = sorted({m for v in entries.values() for m in v})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.5, 0.9 * len(names) + 2), 3))
        width = 0.8 / max(len(metrics), 1)
        x = np.arange(len(names))
        for k, metric in enumerate(metrics):
            ax.bar(x + k * width, [entries[n].get(metric, 0.0) for n in names], width, label=metric)
        ax.set_xticks(x + width * (len(metrics) - 1) / 2, names, rotation=30, ha="right")
        ax.set_ylabel("global std")
        ax.legend(fontsize=7)
        return _save(fig, path)


def plot_object_size(table, path):
    """Max |attribution| per (object size, patch size) as an annotated grid."""
    sizes = sorted(table, key=float)
    patches = sorted({p for row in table.values() for p in row}, key=float)
    grid = np.array([[table[s].get(p, np.nan) for p in patches] for s in sizes])
    with plt.rc_context(STYLE | {"axes.grid": False}):
        fig, ax = plt.subplots(figsize=(1 + 0.8 * len(patches), 1 + 0.6 * len(sizes)))
        im = ax.imshow(grid, cmap="viridis", aspect="auto")
        for (i, j), v in np.ndenumerate(grid):
            ax.text(j, i, f"{v:.3f}", ha="center", va="center", fontsize=7, color="w")
        ax.set_xticks(range(len(patches)), patches)
        ax.set_yticks(range(len(sizes)), sizes)
        ax.set_xlabel("patch side")
        ax.set_ylabel("disk diameter")
        fig.colorbar(im, ax=ax, label="max |attribution|")
        return _save(fig, path)
