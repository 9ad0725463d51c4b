"""Rank statistics: Wilcoxon rank-sum, ROC/AUC, DeLong's paired test, MAE."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

EXACT_MAX_SMALL = 8
# exact DP cost grows with N * m * (m * N); past this many pooled values use the normal approximation
EXACT_MAX_TOTAL = 400


def midranks(x) -> np.ndarray:
    return sps.rankdata(np.asarray(x, dtype=np.float64), method="average")


@dataclass(frozen=True)
class RankSumResult:
    statistic: float  # rank sum of the first sample
    p_value: float
    method: str  # "exact" or "normal"


def _exact_rank_sum_p(doubled: np.ndarray, n1: int) -> float:
    """Two-sided p from the permutation distribution of sum(doubled ranks) of ``n1`` items.

    Works on doubled midranks so ties stay integral. Counting is a DP over
    (items chosen, rank sum).
    """
    big_n = doubled.size
    obs = int(doubled[:n1].sum())
    expected2 = n1 * (big_n + 1)  # E[sum of doubled ranks]
    max_sum = int(np.sort(doubled)[-n1:].sum()) if n1 else 0
    ways = np.zeros((n1 + 1, max_sum + 1))
    ways[0, 0] = 1.0
    for r in doubled.astype(int):
        # iterate j downwards so each item is used once
        for j in range(min(n1, big_n), 0, -1):
            ways[j, r:] += ways[j - 1, : max_sum + 1 - r]
    dist = ways[n1]
    sums = np.arange(max_sum + 1)
    extreme = np.abs(sums - expected2) >= abs(obs - expected2)
    return float(min(1.0, dist[extreme].sum() / dist.sum()))


def rank_sum_test(x, y, method: str = "auto") -> RankSumResult:
    """Two-sided Wilcoxon rank-sum test of ``x`` against ``y``.

    ``auto`` enumerates the exact (tie-aware) permutation distribution when
    the smaller sample has at most 8 values and the pooled sample is small
    enough to count; otherwise a normal approximation with tie correction
    and continuity correction is used.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n1, n2 = x.size, y.size
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be nonempty")
    ranks = midranks(np.concatenate([x, y]))
    w = float(ranks[:n1].sum())
    if method == "auto":
        exact = min(n1, n2) <= EXACT_MAX_SMALL and n1 + n2 <= EXACT_MAX_TOTAL
        method = "exact" if exact else "normal"
    if method == "exact":
        doubled = np.rint(2 * ranks).astype(int)
        if n1 <= n2:
            p = _exact_rank_sum_p(doubled, n1)
        else:
            p = _exact_rank_sum_p(np.concatenate([doubled[n1:], doubled[:n1]]), n2)
        return RankSumResult(w, p, "exact")
    if method != "normal":
        raise ValueError(f"unknown method {method!r}")
    big_n = n1 + n2
    _, counts = np.unique(ranks, return_counts=True)
    tie = float((counts**3 - counts).sum())
    var = n1 * n2 / 12.0 * ((big_n + 1) - tie / (big_n * (big_n - 1)))
    if var <= 0:
        return RankSumResult(w, 1.0, "normal")
    dev = abs(w - n1 * (big_n + 1) / 2.0)
    z = max(dev - 0.5, 0.0) / math.sqrt(var)
    return RankSumResult(w, float(min(1.0, 2.0 * sps.norm.sf(z))), "normal")


@dataclass(frozen=True)
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    n_pos: int
    n_neg: int


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    y = y.astype(int)
    if y.min(initial=1) == y.max(initial=0):
        raise ValueError("ROC analysis needs both positive and negative cases")
    return s, y


def roc_auc(scores, labels) -> RocResult:
    """Mann-Whitney AUC (ties count one half) and the threshold-sweep curve."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    r = midranks(s)
    auc = (r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    thr = np.unique(s)[::-1]
    tp = np.array([(s[y == 1] >= t).sum() for t in thr])
    fp = np.array([(s[y == 0] >= t).sum() for t in thr])
    fpr = np.concatenate([[0.0], fp / n_neg])
    tpr = np.concatenate([[0.0], tp / n_pos])
    return RocResult(fpr, tpr, np.concatenate([[np.inf], thr]), float(auc), n_pos, n_neg)


def trapezoid_area(fpr, tpr) -> float:
    fpr, tpr = np.asarray(fpr), np.asarray(tpr)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def placements(scores, labels) -> tuple[np.ndarray, np.ndarray, float]:
    """DeLong structural components: per-positive V10, per-negative V01 and the AUC."""
    s, y = _check_binary(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    psi = (pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])
    v10 = psi.mean(axis=1)
    v01 = psi.mean(axis=0)
    return v10, v01, float(v10.mean())


@dataclass(frozen=True)
class DeLongResult:
    auc_a: float
    auc_b: float
    z: float
    p_value: float
    variance: float  # of auc_a - auc_b
    degenerate: bool = False


def delong_test(scores_a, scores_b, labels) -> DeLongResult:
    """Paired two-sided DeLong test for AUC(a) == AUC(b) on the same cases."""
    v10a, v01a, auc_a = placements(scores_a, labels)
    v10b, v01b, auc_b = placements(scores_b, labels)
    m, n = v10a.size, v01a.size
    s10 = np.cov(np.vstack([v10a, v10b])) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(np.vstack([v01a, v01b])) if n > 1 else np.zeros((2, 2))
    var = (s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / m + (s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]) / n
    diff = auc_a - auc_b
    if var <= 1e-15:
        if abs(diff) < 1e-15:
            return DeLongResult(auc_a, auc_b, 0.0, 1.0, 0.0)
        return DeLongResult(auc_a, auc_b, math.copysign(math.inf, diff), 0.0, 0.0, degenerate=True)
    z = diff / math.sqrt(var)
    return DeLongResult(auc_a, auc_b, z, float(2.0 * sps.norm.sf(abs(z))), float(var))


def mae(predictions, targets) -> tuple[float, float]:
    """Mean and population SD of absolute errors, both in percentage points."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValueError("need at least one pair")
    err = np.abs(p - t) * 100.0
    return float(err.mean()), float(err.std())
