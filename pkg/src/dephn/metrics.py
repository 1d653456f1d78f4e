"""Binary classification metrics: clamped log-loss and rank-statistic AUC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class SingleClassError(ValueError):
    """AUC is undefined when only one class is present."""


def logloss(y_pred, y_true, eps: float = 1e-7) -> float:
    p = np.clip(np.asarray(y_pred, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(y_true, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def auc(scores, labels) -> float:
    """P(score_pos > score_neg) with ties counted one half (Mann-Whitney U / n_pos n_neg)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {y.shape}")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
