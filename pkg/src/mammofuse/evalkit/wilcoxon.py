"""Paired Wilcoxon signed-rank test with an exact null distribution for small samples."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

ALPHA = 0.05
EXACT_MAX_N = 25


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # sum of ranks of positive differences
    p_value: float
    n_effective: int
    method: str  # "exact" | "normal" | "degenerate"

    @property
    def significant(self) -> bool:
        return self.p_value < ALPHA

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"


def exact_null_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """counts[k] = number of sign assignments whose doubled positive-rank sum equals k."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        counts[r:] = counts[r:] + counts[:total + 1 - r].copy()
    return counts


def wilcoxon_signed_rank(paired_a, paired_b, exact_max_n: int = EXACT_MAX_N) -> WilcoxonResult:
    """Two-sided test of H0: the paired differences are symmetric about zero.

    Zero differences are dropped and tied magnitudes get average ranks. Up to
    ``exact_max_n`` non-zero pairs the p-value is exact; above it a normal approximation
    with tie and continuity corrections is used.
    """
    a = np.asarray(paired_a, dtype=np.float64).ravel()
    b = np.asarray(paired_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("paired inputs differ in length")
    if a.size < 5:
        raise ValueError("wilcoxon_signed_rank needs at least 5 pairs")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(int)
        counts = exact_null_counts(doubled)
        k = int(round(2 * w_plus))
        lower = sum(counts[:k + 1])
        upper = sum(counts[k:])
        p = min(1.0, 2 * min(lower, upper) / 2 ** n)
        return WilcoxonResult(w_plus, float(p), n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    dev = abs(w_plus - mean) - 0.5
    z = max(dev, 0.0) / math.sqrt(var)
    return WilcoxonResult(w_plus, float(min(1.0, 2 * norm.sf(z))), n, "normal")
