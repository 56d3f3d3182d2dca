"""Shift-distribution analysis: collect per-occurrence embedding shifts,
project them to 2-D, and classify each word's displacement pattern.

Occurrences are bucketed by the sign of their utterance label. Three
patterns are distinguished by where the positive- and negative-context
centroids sit relative to the word's overall centroid:

* inherent-polarity  one context barely moves the word, the opposite
                     context pulls it far away;
* polarizable        both contexts pull far, in opposing directions;
* neutral            neither context moves the word appreciably.

"Far" is measured against the word's own projected spread, so the rule
is invariant to rescaling the projected cloud.

The PCA is fit once on shifted embeddings pooled across the vocabulary,
so every word's panel shares the same axes. This module only emits plot
data (JSON summaries and a CSV of projected points); rendering lives
with the CLI.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import AlignedUtterance
from .errors import ConvergenceError, UnsupportedAblationError, ValidationError
from .model import RavenModel, ShiftRecord

__all__ = [
    "ShiftCorpus",
    "WordShiftSummary",
    "PcaResult",
    "extract_shifts",
    "pca_project",
    "summarize_word",
    "analyze_corpus",
    "export_analysis",
]

log = logging.getLogger("raven.analysis")

PATTERNS = ("inherent-polarity", "polarizable", "neutral", "insufficient-data")


@dataclass
class ShiftCorpus:
    """Shift records grouped by word; zero/unsigned labels are excluded."""

    groups: dict[str, list[ShiftRecord]] = field(default_factory=dict)
    excluded: list[ShiftRecord] = field(default_factory=list)

    @property
    def record_count(self) -> int:
        return sum(len(g) for g in self.groups.values())

    def all_records(self) -> list[ShiftRecord]:
        out = []
        for word in self.groups:
            out.extend(self.groups[word])
        return out


@dataclass
class WordShiftSummary:
    word: str
    pattern: str
    count: int
    positive_count: int
    negative_count: int
    overall_centroid: np.ndarray
    positive_centroid: np.ndarray | None
    negative_centroid: np.ndarray | None
    positive_cov: np.ndarray | None
    negative_cov: np.ndarray | None

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "word": self.word,
            "pattern": self.pattern,
            "count": self.count,
            "positive_count": self.positive_count,
            "negative_count": self.negative_count,
            "overall_centroid": arr(self.overall_centroid),
            "positive_centroid": arr(self.positive_centroid),
            "negative_centroid": arr(self.negative_centroid),
            "positive_cov": arr(self.positive_cov),
            "negative_cov": arr(self.negative_cov),
        }


@dataclass
class PcaResult:
    projections: np.ndarray        # (n, k)
    components: np.ndarray         # (k, dim)
    explained_variance: np.ndarray  # (k,) eigenvalues
    mean: np.ndarray               # (dim,)
    total_variance: float

    def project(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - self.mean) @ self.components.T


def extract_shifts(model: RavenModel, utterances: list[AlignedUtterance]) -> ShiftCorpus:
    """Run the model over a dataset and collect one record per occurrence.

    Only the shifting variants produce records; the concatenation
    variants have no embedding displacement to analyze.
    """
    if model.config.ablation not in ("full", "no_sub"):
        raise UnsupportedAblationError(
            f"shift analysis needs a shifting variant (full or no_sub), got {model.config.ablation!r}"
        )
    corpus = ShiftCorpus()
    for utt in utterances:
        _, records = model.forward(utt, collect_shifts=True)
        for rec in records:
            if not np.isfinite(rec.label) or rec.label == 0.0:
                corpus.excluded.append(rec)
            else:
                corpus.groups.setdefault(rec.word, []).append(rec)
    return corpus


_POWER_SEED = 0x9A7E11


def pca_project(points, k: int = 2, tol: float = 1e-10, max_iter: int = 10_000) -> PcaResult:
    """Top-k principal components via power iteration with deflation.

    Deterministic: the start vector comes from a fixed seed, components
    are re-orthogonalized against earlier ones each sweep, and each
    component's largest-magnitude coordinate is flipped positive.
    ``tol`` is relative to the covariance scale (deflating component j
    perturbs later eigenpairs by about ``tol * lambda_j``, so an
    absolute threshold below that is unreachable). Raises
    ConvergenceError (with the residual) if an eigenpair fails to settle
    within ``max_iter`` sweeps.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"pca_project needs an [n, dim] array, got shape {x.shape}")
    n, dim = x.shape
    if k < 1 or k > dim:
        raise ValidationError(f"component count k={k} must lie in [1, {dim}]")
    if n < k + 1:
        raise ValidationError(f"need at least {k + 1} points for {k} components, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = (centered.T @ centered) / (n - 1)
    total_variance = float(np.trace(cov))

    rng = np.random.default_rng(_POWER_SEED)
    start = rng.normal(size=dim)
    components = np.zeros((k, dim))
    eigenvalues = np.zeros(k)
    work = cov.copy()
    scale_ref = max(1.0, total_variance)
    for j in range(k):
        v = start.copy()
        for prev in components[:j]:
            v -= (v @ prev) * prev
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise ConvergenceError(f"degenerate start vector for component {j}")
        v /= norm
        lam = float(v @ work @ v)
        converged = False
        residual = float("inf")
        for _ in range(max_iter):
            w = work @ v
            for prev in components[:j]:
                w -= (w @ prev) * prev
            wnorm = np.linalg.norm(w)
            if wnorm < tol * scale_ref:
                # Remaining variance is (numerically) zero in this
                # subspace; the current direction is a valid eigenvector
                # with eigenvalue 0.
                lam = 0.0
                converged = True
                break
            v = w / wnorm
            lam = float(v @ work @ v)
            residual = float(np.linalg.norm(work @ v - lam * v))
            if residual <= tol * scale_ref:
                converged = True
                break
        if not converged:
            raise ConvergenceError(
                f"power iteration did not converge for component {j} within {max_iter} sweeps",
                residual=residual,
            )
        top = int(np.argmax(np.abs(v)))
        if v[top] < 0:
            v = -v
        components[j] = v
        eigenvalues[j] = lam
        work = work - lam * np.outer(v, v)

    projections = centered @ components.T
    return PcaResult(
        projections=projections,
        components=components,
        explained_variance=eigenvalues,
        mean=mean,
        total_variance=total_variance,
    )


def _bucket_scale(points: np.ndarray) -> float:
    """Isotropic spread of a 2-D point cloud: sqrt(mean per-axis variance)."""
    if points.shape[0] < 2:
        return 0.0
    return float(np.sqrt(np.mean(np.var(points, axis=0))))


def _cov2(points: np.ndarray) -> np.ndarray:
    """2x2 covariance with eigenvalues clipped at zero (PSD guarantee)."""
    if points.shape[0] < 2:
        return np.zeros((2, 2))
    cov = np.cov(points.T, ddof=1)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    return (vecs * vals) @ vecs.T


def summarize_word(
    word: str,
    projected: np.ndarray,
    labels: np.ndarray,
    min_bucket: int = 5,
    offset_ratio: float = 0.5,
) -> WordShiftSummary:
    """Tag one word's projected occurrences with its displacement pattern.

    ``projected`` holds the word's 2-D points, ``labels`` the matching
    utterance labels (nonzero). A bucket with fewer than ``min_bucket``
    points yields the insufficient-data tag. An offset counts as "far"
    when it exceeds ``offset_ratio`` times the mean per-bucket spread;
    the edge case of two far offsets on the same side (possible only
    when excluded records drag the overall centroid) is tagged neutral.
    """
    pos = projected[labels > 0]
    neg = projected[labels < 0]
    overall = projected.mean(axis=0)
    summary = WordShiftSummary(
        word=word,
        pattern="insufficient-data",
        count=projected.shape[0],
        positive_count=pos.shape[0],
        negative_count=neg.shape[0],
        overall_centroid=overall,
        positive_centroid=pos.mean(axis=0) if pos.size else None,
        negative_centroid=neg.mean(axis=0) if neg.size else None,
        positive_cov=_cov2(pos) if pos.size else None,
        negative_cov=_cov2(neg) if neg.size else None,
    )
    if pos.shape[0] < min_bucket or neg.shape[0] < min_bucket:
        return summary
    offset_pos = summary.positive_centroid - overall
    offset_neg = summary.negative_centroid - overall
    d_pos = float(np.linalg.norm(offset_pos))
    d_neg = float(np.linalg.norm(offset_neg))
    spread = 0.5 * (_bucket_scale(pos) + _bucket_scale(neg))
    threshold = offset_ratio * spread
    far_pos = d_pos > threshold
    far_neg = d_neg > threshold
    if far_pos and far_neg:
        if float(offset_pos @ offset_neg) < 0.0:
            summary.pattern = "polarizable"
        else:
            summary.pattern = "neutral"
    elif far_pos or far_neg:
        summary.pattern = "inherent-polarity"
    else:
        summary.pattern = "neutral"
    return summary


def analyze_corpus(
    corpus: ShiftCorpus, min_bucket: int = 5, offset_ratio: float = 0.5
) -> tuple[list[WordShiftSummary], PcaResult]:
    """Fit the global PCA on all shifted embeddings and summarize each word."""
    records = corpus.all_records()
    if len(records) < 3:
        raise ValidationError(f"need at least 3 shift records to analyze, got {len(records)}")
    points = np.stack([rec.shifted for rec in records])
    pca = pca_project(points, k=2)
    summaries = []
    offset = 0
    for word, group in corpus.groups.items():
        proj = pca.projections[offset : offset + len(group)]
        offset += len(group)
        labels = np.array([rec.label for rec in group])
        summaries.append(summarize_word(word, proj, labels, min_bucket, offset_ratio))
    summaries.sort(key=lambda s: s.word)
    return summaries, pca


def export_analysis(
    summaries: list[WordShiftSummary],
    corpus: ShiftCorpus,
    pca: PcaResult,
    summary_path,
    points_path,
) -> None:
    """Write the per-word summary JSON and per-point CSV.

    The CSV (word, x, y, polarity, shift scale, utterance id) is enough
    to re-derive every centroid and to draw per-word contours externally.
    Both files are deterministic for identical inputs.
    """
    if not summaries:
        raise ValidationError("nothing to export: no word summaries")
    doc = {
        "pca": {
            "explained_variance": pca.explained_variance.tolist(),
            "total_variance": pca.total_variance,
            "components": pca.components.tolist(),
            "mean": pca.mean.tolist(),
        },
        "excluded_records": len(corpus.excluded),
        "words": {s.word: s.to_dict() for s in summaries},
    }
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")

    records = corpus.all_records()
    projections = pca.projections
    with open(points_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["word", "x", "y", "polarity", "shift_scale", "utterance_id"])
        for rec, point in zip(records, projections):
            writer.writerow(
                [
                    rec.word,
                    repr(float(point[0])),
                    repr(float(point[1])),
                    "positive" if rec.label > 0 else "negative",
                    repr(rec.shift_scale),
                    rec.utterance_id,
                ]
            )
    log.info("analysis exported: %d words, %d points", len(summaries), len(records))
