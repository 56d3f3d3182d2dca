"""Figure rendering for the report paths (file output only, Agg backend).

The analysis library emits plot *data*; these helpers turn that data
into the figures that land next to it: per-word Gaussian contours of
projected shifts, ablation comparison bars, and training curves.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import PcaResult, ShiftCorpus, WordShiftSummary

__all__ = [
    "render_shift_contours",
    "render_ablation_chart",
    "render_training_curves",
]

_POS_COLOR = "#2166ac"
_NEG_COLOR = "#b2182c"


def _cov_ellipse(ax, mean, cov, n_std, color):
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    angle = math.degrees(math.atan2(vecs[1, -1], vecs[0, -1]))
    width, height = 2 * n_std * np.sqrt(vals[-1]), 2 * n_std * np.sqrt(vals[0])
    if width <= 0 or height <= 0:
        return
    from matplotlib.patches import Ellipse

    ax.add_patch(
        Ellipse(mean, width, height, angle=angle, fill=False, color=color, lw=1.0, alpha=0.8)
    )


def render_shift_contours(
    summaries: list[WordShiftSummary],
    corpus: ShiftCorpus,
    pca: PcaResult,
    out_path,
    words: list[str] | None = None,
    max_words: int = 9,
) -> None:
    """Panel per word: projected occurrences, 1/2-sigma contours per
    polarity bucket, and arrows from the overall centroid to each
    bucket centroid."""
    by_word = {s.word: s for s in summaries}
    if words is None:
        usable = [s for s in summaries if s.pattern != "insufficient-data"]
        if not usable:
            usable = list(summaries)
        usable.sort(key=lambda s: (-s.count, s.word))
        words = [s.word for s in usable[:max_words]]
    words = [w for w in words if w in by_word]
    if not words:
        raise ValueError("no words to plot")

    # Recover each word's projected points from the corpus ordering.
    records = corpus.all_records()
    points_by_word: dict[str, list[tuple[np.ndarray, float]]] = {}
    for rec, point in zip(records, pca.projections):
        points_by_word.setdefault(rec.word, []).append((point, rec.label))

    ncols = min(3, len(words))
    nrows = math.ceil(len(words) / ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(4 * ncols, 3.6 * nrows), squeeze=False)
    for ax in axes.flat:
        ax.set_axis_off()
    for idx, word in enumerate(words):
        ax = axes[idx // ncols][idx % ncols]
        ax.set_axis_on()
        summary = by_word[word]
        pts = points_by_word.get(word, [])
        xy = np.array([p for p, _ in pts])
        labels = np.array([l for _, l in pts])
        for mask, color in ((labels > 0, _POS_COLOR), (labels < 0, _NEG_COLOR)):
            if mask.any():
                ax.scatter(xy[mask, 0], xy[mask, 1], s=6, alpha=0.25, color=color, linewidths=0)
        for centroid, cov, color in (
            (summary.positive_centroid, summary.positive_cov, _POS_COLOR),
            (summary.negative_centroid, summary.negative_cov, _NEG_COLOR),
        ):
            if centroid is None:
                continue
            if cov is not None:
                for n_std in (1.0, 2.0):
                    _cov_ellipse(ax, centroid, cov, n_std, color)
            ax.annotate(
                "",
                xy=tuple(centroid),
                xytext=tuple(summary.overall_centroid),
                arrowprops=dict(arrowstyle="->", color=color, lw=1.6),
            )
        ax.plot(*summary.overall_centroid, marker="o", color="black", ms=5)
        ax.set_title(f"{word}  [{summary.pattern}]", fontsize=10)
        ax.tick_params(labelsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def render_ablation_chart(comparison: dict, out_path) -> None:
    """Bar chart of binary accuracy and MAE per model variant.

    ``comparison`` maps variant name -> {"acc2": ..., "mae": ..., ...}
    (medians when multiple seeds were run).
    """
    variants = list(comparison)
    acc2 = [comparison[v]["acc2"] for v in variants]
    mae = [comparison[v]["mae"] for v in variants]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    xs = np.arange(len(variants))
    ax1.bar(xs, acc2, color="#4477aa")
    ax1.set_xticks(xs, variants, rotation=20, fontsize=8)
    ax1.set_ylabel("binary accuracy")
    ax1.set_ylim(0.0, 1.0)
    ax1.axhline(0.5, color="gray", lw=0.8, ls="--")
    ax2.bar(xs, mae, color="#ee7733")
    ax2.set_xticks(xs, variants, rotation=20, fontsize=8)
    ax2.set_ylabel("MAE")
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)


def render_training_curves(log_entries: list[dict], out_path) -> None:
    """Loss per epoch for train/valid, plus validation accuracy if present."""
    train_pts = [(e["epoch"], e["loss"]) for e in log_entries if e["split"] == "train"]
    valid_pts = [(e["epoch"], e["loss"]) for e in log_entries if e["split"] == "valid"]
    acc_pts = [
        (e["epoch"], e["metrics"]["acc2"])
        for e in log_entries
        if e["split"] == "valid" and "metrics" in e and "acc2" in e.get("metrics", {})
    ]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    if train_pts:
        ax.plot(*zip(*train_pts), label="train loss", color="#4477aa")
    if valid_pts:
        ax.plot(*zip(*valid_pts), label="valid loss", color="#ee7733")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if acc_pts:
        ax2 = ax.twinx()
        ax2.plot(*zip(*acc_pts), label="valid acc-2", color="#228833", ls="--")
        ax2.set_ylabel("binary accuracy")
        ax2.set_ylim(0, 1)
    if train_pts or valid_pts:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
