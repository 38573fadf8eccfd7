"""Pixel- and image-level metrics.

Metrics that are undefined for an input (no positive pixels, a single class)
return ``None`` rather than a number.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionError


def _flat(a, g):
    a = np.asarray(a, dtype=np.float64).ravel()
    g = np.asarray(g).ravel().astype(bool)
    if a.shape != g.shape:
        raise DimensionError(f"map has {a.size} pixels, mask has {g.size}")
    return a, g


def pixel_f1(a, g, threshold: float = 0.5) -> float | None:
    """F1 = 2TP/(2TP+FP+FN) with pixels ``a > threshold`` predicted positive."""
    a, g = _flat(a, g)
    n_pos = int(g.sum())
    if n_pos == 0:
        return None
    pred = a > threshold
    tp = int((pred & g).sum())
    return 2 * tp / (int(pred.sum()) + n_pos)


def threshold_candidates(a) -> np.ndarray:
    """Midpoints between consecutive distinct values plus two endpoints.

    The low endpoint ``min(a) - 1`` marks every pixel positive, the high
    endpoint ``max(a)`` marks none.
    """
    v = np.unique(np.asarray(a, dtype=np.float64))
    mids = (v[:-1] + v[1:]) / 2.0
    return np.concatenate([[v[0] - 1.0], mids, [v[-1]]])


def best_threshold_f1(a, g) -> tuple[float, float] | None:
    """Maximum F1 over all distinct binarizations; ties go to the lowest threshold."""
    a, g = _flat(a, g)
    n_pos = int(g.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-a, kind="stable")
    a_sorted = a[order]
    tp_cum = np.cumsum(g[order])
    # cut after each run of equal values: predicted positives = k
    ends = np.flatnonzero(np.r_[a_sorted[1:] != a_sorted[:-1], True])
    k = ends + 1
    tp = tp_cum[ends]
    f1_cuts = 2 * tp / (k + n_pos)
    distinct_desc = a_sorted[ends]
    # thresholds for cuts: below the smallest value of each kept run
    nxt = np.r_[distinct_desc[1:], np.nan]
    th_cuts = np.where(np.isnan(nxt), distinct_desc[-1] - 1.0, (distinct_desc + nxt) / 2.0)
    f1s = np.r_[0.0, f1_cuts]
    ths = np.r_[distinct_desc[0], th_cuts]
    best = f1s.max()
    pick = np.flatnonzero(f1s == best)
    i = pick[np.argmin(ths[pick])]
    return float(f1s[i]), float(ths[i])


def image_auc(scores, labels) -> float | None:
    """ROC AUC via the Mann–Whitney rank statistic; ties count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        return None
    ranks = rankdata(s)
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def balanced_accuracy(scores, labels, threshold: float = 0.5) -> tuple[float, float, float] | None:
    """(accuracy, TNR, TPR) with ``score > threshold`` meaning fake."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        return None
    pred = s > threshold
    tpr = int((pred & y).sum()) / n1
    tnr = int((~pred & ~y).sum()) / n0
    return (tnr + tpr) / 2.0, tnr, tpr


@dataclass
class EvalRecord:
    image_id: str
    gt_label: str  # "pristine" | "fake"
    score: float
    f1_fixed: float | None = None
    f1_best: float | None = None
    best_threshold: float | None = None

    @property
    def label(self) -> int:
        return int(self.gt_label == "fake")


def evaluate_record(image_id: str, label: int, score: float, a, g) -> EvalRecord:
    rec = EvalRecord(image_id, "fake" if label else "pristine", float(score))
    if label and np.asarray(g).any():
        rec.f1_fixed = pixel_f1(a, g, 0.5)
        rec.f1_best, rec.best_threshold = best_threshold_f1(a, g)
    return rec


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(records: list[EvalRecord], threshold: float = 0.5) -> dict:
    """Macro-averaged F1 (fake images only), AUC and balanced accuracy."""
    records = sorted(records, key=lambda r: r.image_id)
    scores = [r.score for r in records]
    labels = [r.label for r in records]
    ba = balanced_accuracy(scores, labels, threshold)
    return {
        "n_images": len(records),
        "n_fake": int(sum(labels)),
        "f1_fixed": _mean(r.f1_fixed for r in records),
        "f1_best": _mean(r.f1_best for r in records),
        "auc": image_auc(scores, labels),
        "balanced_accuracy": ba[0] if ba else None,
        "tnr": ba[1] if ba else None,
        "tpr": ba[2] if ba else None,
    }


def dataset_best_threshold(maps, masks, grid=None) -> tuple[float, float] | None:
    """Single threshold maximizing mean F1 over images with positives (grid search)."""
    grid = np.linspace(0.0, 1.0, 101) if grid is None else np.asarray(grid)
    pairs = [(a, g) for a, g in zip(maps, masks) if np.asarray(g).any()]
    if not pairs:
        return None
    means = [np.mean([pixel_f1(a, g, th) for a, g in pairs]) for th in grid]
    i = int(np.argmax(means))
    return float(means[i]), float(grid[i])
