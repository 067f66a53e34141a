"""Figures for reports, written straight to files (Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import ActStatsReport, RankReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    # fixed metadata keeps repeated renders byte-stable
    "svg.hashsalt": "flatcomp",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    meta = {"Software": None} if path.suffix == ".png" else {}
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path


def rank_curves(groups: Mapping[str, Mapping[str, RankReport]], path, threshold: float = 0.8) -> Path:
    """Cumulative explained variance against component count.

    ``groups`` maps a run label (e.g. optimizer) to its ``{"qkv": ..., "ffn": ...}`` curves;
    one panel per block group.
    """
    keys = sorted({k for g in groups.values() for k in g})
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 2.8), squeeze=False)
        for ax, key in zip(axes[0], keys):
            for label, g in groups.items():
                if key not in g:
                    continue
                cv = g[key].cumulative_variance
                k = g[key].components_at(threshold)
                ax.plot(np.arange(1, len(cv) + 1), cv, label=f"{label} (k={k})")
            ax.axhline(threshold, color="0.5", lw=0.7, ls="--")
            ax.set_xlabel("components")
            ax.set_ylabel("explained variance")
            ax.set_title(key)
            ax.legend(frameon=False)
        return _save(fig, path)


def activation_ranges(stats: Mapping[str, ActStatsReport], path) -> Path:
    """Per-channel min/max envelope of one activation site, one panel per run label."""
    labels = list(stats)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(labels), 1, figsize=(6.0, 1.9 * len(labels)),
                                 squeeze=False, sharex=True, sharey=True)
        for ax, label in zip(axes[:, 0], labels):
            r = stats[label]
            ch = np.arange(len(r.max))
            ax.fill_between(ch, r.min, r.max, step="mid", alpha=0.5, lw=0)
            ax.plot(ch, r.mean, lw=0.6, color="k")
            ax.set_ylabel("activation")
            ax.set_title(f"{label}: {r.layer}  outlier ratio {r.outlier_ratio:.2f}")
        axes[-1, 0].set_xlabel("channel")
        return _save(fig, path)


def suite_drops(rows: Sequence, path) -> Path:
    """Grouped bars of drop-from-FP per compression cell, one bar per fine-tuning optimizer."""
    cells: list = []
    by_opt: Dict[str, Dict[str, list]] = {}
    for r in rows:
        if r.method == "FP32":
            continue
        cell = f"{r.method}\n{r.config}"
        if cell not in cells:
            cells.append(cell)
        by_opt.setdefault(r.finetune_opt, {}).setdefault(cell, []).append(float(r.drop_from_fp))
    opts = list(by_opt)
    width = 0.8 / max(len(opts), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(cells) + 1.5), 3.0))
        x = np.arange(len(cells))
        for i, opt in enumerate(opts):
            means = [np.mean(by_opt[opt].get(c, [np.nan])) for c in cells]
            ax.bar(x + (i - (len(opts) - 1) / 2) * width, means, width, label=opt or "?")
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xticks(x)
        ax.set_xticklabels(cells, fontsize=7)
        ax.set_ylabel("top-1 drop from FP (pts)")
        if opts:
            ax.legend(frameon=False)
        return _save(fig, path)


def training_curves(histories: Mapping[str, Sequence[dict]], path) -> Path:
    """Train loss and (when recorded) test top-1 per epoch."""
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(6.4, 2.6))
        for label, hist in histories.items():
            ep = [h["epoch"] for h in hist]
            a1.plot(ep, [h["train_loss"] for h in hist], marker="o", ms=3, label=label)
            if hist and "test_top1" in hist[0]:
                a2.plot(ep, [h["test_top1"] for h in hist], marker="o", ms=3, label=label)
        a1.set_xlabel("epoch")
        a1.set_ylabel("train loss")
        a2.set_xlabel("epoch")
        a2.set_ylabel("test top-1 (%)")
        a1.legend(frameon=False)
        return _save(fig, path)


def sharpness_bars(values: Mapping[str, Sequence[float]], path) -> Path:
    """Top Hessian eigenvalue per label (log scale), one dot per seed."""
    labels = list(values)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 * len(labels) + 1.5, 2.8))
        for i, label in enumerate(labels):
            v = np.asarray(values[label], dtype=float)
            ax.bar(i, v.mean(), 0.6, alpha=0.5)
            ax.plot(np.full(len(v), i), v, "k.", ms=4)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels)
        ax.set_yscale("log")
        ax.set_ylabel("top Hessian eigenvalue")
        return _save(fig, path)
