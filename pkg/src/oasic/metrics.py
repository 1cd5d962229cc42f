"""Evaluation metrics: ranking quality and accuracy-vs-occlusion curves.

AUROC is computed by the rank formula (equivalent to the Mann-Whitney U
statistic) with average ranks for tied scores, so ties contribute half
credit. Average precision steps through detections in descending score
order (ties broken by original index via a stable sort) and averages the
precision at each positive. Both are exact, not trapezoidal estimates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["auroc", "average_precision", "accuracy", "EvalCurve", "auc_occ"]


def _binary_arrays(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if scores.size == 0:
        raise ValueError("empty input")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """Ranks 1..n with tied scores sharing their average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    s = scores[order]
    # Group boundaries between runs of equal values.
    bounds = np.flatnonzero(np.r_[True, s[1:] != s[:-1], True])
    for a, b in zip(bounds[:-1], bounds[1:]):
        ranks[order[a:b]] = 0.5 * (a + 1 + b)
    return ranks


def auroc(scores, labels) -> float:
    """Area under the ROC curve; ties get half credit.

    Requires at least one positive and one negative label.
    """
    scores, labels = _binary_arrays(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both positive and negative labels")
    ranks = _average_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Mean precision over positives, in descending score order.

    Ties are broken by original index (stable sort on negated scores).
    Requires at least one positive label.
    """
    scores, labels = _binary_arrays(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("need at least one positive label")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits == 1].sum() / n_pos)


def accuracy(predicted, true) -> float:
    """Fraction of exact label matches."""
    predicted = np.asarray(predicted).ravel()
    true = np.asarray(true).ravel()
    if predicted.shape != true.shape:
        raise ValueError("label lists differ in length")
    if predicted.size == 0:
        raise ValueError("empty input")
    return float(np.mean(predicted == true))


@dataclass(frozen=True)
class EvalCurve:
    """Accuracy as a function of occlusion level.

    Levels are stored sorted ascending; at least two distinct levels are
    required so the curve spans a non-degenerate interval.
    """

    levels: tuple[float, ...]
    accuracies: tuple[float, ...]

    def __post_init__(self):
        levels = tuple(float(v) for v in self.levels)
        accs = tuple(float(v) for v in self.accuracies)
        if len(levels) != len(accs):
            raise ValueError("levels and accuracies differ in length")
        if len(levels) < 2:
            raise ValueError("a curve needs at least two points")
        if any(not 0.0 <= v <= 1.0 for v in levels):
            raise ValueError("levels must lie in [0, 1]")
        if any(not 0.0 <= v <= 1.0 for v in accs):
            raise ValueError("accuracies must lie in [0, 1]")
        order = np.argsort(levels, kind="stable")
        levels = tuple(levels[i] for i in order)
        accs = tuple(accs[i] for i in order)
        if any(a == b for a, b in zip(levels, levels[1:])):
            raise ValueError("levels must be distinct")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "accuracies", accs)


def auc_occ(curve: EvalCurve) -> float:
    """Trapezoidal area under an accuracy-vs-occlusion curve, normalized
    by the level span so the result lies in [0, 1]."""
    levels = np.asarray(curve.levels)
    accs = np.asarray(curve.accuracies)
    span = levels[-1] - levels[0]
    return float(np.trapezoid(accs, levels) / span)
