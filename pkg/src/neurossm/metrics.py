"""Classification metrics and the Wilcoxon signed-rank test."""
from __future__ import annotations

import math
import warnings

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError

EXACT_MAX_N = 20


def accuracy(y_true, probs) -> float:
    y_true = np.asarray(y_true)
    return float(np.mean(np.argmax(probs, axis=1) == y_true))


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def macro_f1(y_true, y_pred, n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class never predicted nor present scores 0."""
    cm = confusion_matrix(y_true, y_pred, n_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(n_classes), where=denom > 0)
    return float(f1.mean())


def binary_auc(is_pos, scores) -> float | None:
    """Mann-Whitney AUC with midranks for ties; None if either class is empty."""
    is_pos = np.asarray(is_pos, dtype=bool)
    n_pos = int(is_pos.sum())
    n_neg = is_pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[is_pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_auc(y_true, probs) -> float | None:
    """Binary: AUC of the class-1 probability. More classes: macro one-vs-rest
    over classes that have both positives and negatives. None when undefined."""
    y_true = np.asarray(y_true)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[1] == 2:
        return binary_auc(y_true == 1, probs[:, 1])
    aucs = [binary_auc(y_true == c, probs[:, c]) for c in range(probs.shape[1])]
    aucs = [a for a in aucs if a is not None]
    return float(np.mean(aucs)) if aucs else None


def _exact_upper_tail(ranks2: np.ndarray, w2: int) -> float:
    """P(W+ >= w) under the null, ranks given doubled so they are integers."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    return float(counts[w2:].sum() / counts.sum())


def wilcoxon_signed_rank(a, b) -> tuple[float, float]:
    """Two-sided paired test. Returns (min(W+, W-), p).

    Zero differences are dropped. Exact null distribution for n <= 20
    (ties handled through midranks), normal approximation with continuity and
    tie correction above that.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("a and b must be 1-D arrays of equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        warnings.warn("all differences are zero; returning p = 1", RuntimeWarning, stacklevel=2)
        return 0.0, 1.0
    if n < 5:
        raise ContractError(f"need at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    total = n * (n + 1) / 2
    stat = min(w_plus, total - w_plus)
    if n <= EXACT_MAX_N:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        lo = int(round(2 * stat))
        # symmetric null: P(W <= stat) = P(W >= total - stat)
        p = 2 * _exact_upper_tail(ranks2, int(round(2 * total)) - lo)
    else:
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_counts ** 3 - tie_counts) / 48
        z = (abs(w_plus - total / 2) - 0.5) / math.sqrt(var)
        p = math.erfc(max(z, 0.0) / math.sqrt(2))
    return stat, min(1.0, p)
