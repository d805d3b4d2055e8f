"""Classification and agreement metrics.

auroc uses the Mann-Whitney rank formulation with average ranks for ties;
auprc is average precision with tied scores grouped per threshold; f1_at
thresholds p_pos at a stated cutoff; icc31 is the two-way mixed-effects,
consistency, single-measure intraclass correlation.
"""

from __future__ import annotations

import numpy as np


def _check_labeled(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape or s.size < 1:
        raise ValueError(f"scores/labels must be equal-length 1D, got {s.shape} vs {y.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, ties receiving the mean of their covered positions."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """P(score+ > score-) + 0.5 P(tie), via the rank-sum statistic."""
    s, y = _check_labeled(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes present")
    ranks = _average_ranks(s)
    u = float(ranks[y == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auprc(scores, labels) -> float:
    """Average precision over descending distinct thresholds, ties grouped."""
    s, y = _check_labeled(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("auprc needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s = s[order]
    y = y[order]
    ap = 0.0
    tp = 0
    fp = 0
    recall_prev = 0.0
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i:j + 1].sum())
        fp += int(j - i + 1 - y[i:j + 1].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - recall_prev) * precision
        recall_prev = recall
        i = j + 1
    return ap


def f1_at(scores, labels, threshold: float = 0.5) -> float:
    """F1 with predictions = score >= threshold; 0 when the denominator is 0."""
    s, y = _check_labeled(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return 2.0 * tp / denom


def icc31(ratings) -> float | None:
    """ICC(3,1); None when the denominator is zero (agreement undefined)."""
    x = np.asarray(ratings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError(f"ratings must be n>=2 items by k>=2 raters, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("ratings must be finite")
    n, k = x.shape
    item_means = x.mean(axis=1)
    rater_means = x.mean(axis=0)
    grand = x.mean()
    msr = k * float(((item_means - grand) ** 2).sum()) / (n - 1)
    residual = x - item_means[:, None] - rater_means[None, :] + grand
    mse = float((residual ** 2).sum()) / ((n - 1) * (k - 1))
    denom = msr + (k - 1) * mse
    if denom == 0.0:
        return None
    return (msr - mse) / denom
