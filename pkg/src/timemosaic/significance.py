"""Paired significance testing for forecast metrics.

Exact Wilcoxon signed-rank test: for n <= 20 informative pairs the null
distribution is enumerated over all 2^n sign assignments, so p-values are
exact rationals like k / 2^n; larger n falls back to the normal
approximation with tie correction.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import erfc, sqrt

import numpy as np

EXACT_LIMIT = 20


class StatError(ValueError):
    pass


@dataclass
class WilcoxonResult:
    statistic: float  # min(W+, W-), the conventional test statistic
    w_minus: float
    w_plus: float
    n_used: int
    p_value: float
    exact: bool
    alternative: str


def _ranks_with_ties(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) of |differences|."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(
    a, b, alternative: str = "less", zero_policy: str = "discard"
) -> WilcoxonResult:
    """Test whether paired values in `a` are smaller than in `b`.

    alternative: 'less' (median of a-b < 0), 'greater', or 'two-sided'.
    Zero differences are discarded (``zero_policy='discard'``). With
    n <= 20 informative pairs the p-value is exact (enumeration of all
    sign assignments with average-rank ties); above that, a tie-corrected
    normal approximation is used.
    """
    if alternative not in ("less", "greater", "two-sided"):
        raise StatError(f"unknown alternative {alternative!r}")
    if zero_policy != "discard":
        raise StatError(f"unsupported zero_policy {zero_policy!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise StatError(f"need two equal-length 1-D arrays, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise StatError("all paired differences are zero; test undefined")
    ranks = _ranks_with_ties(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())

    if n <= EXACT_LIMIT:
        # Null distribution of W+ over all 2^n sign assignments.
        totals = np.zeros(1)
        for r in ranks:
            totals = np.concatenate([totals, totals + r])
        if alternative == "less":
            p = float(np.mean(totals <= w_plus + 1e-12))
        elif alternative == "greater":
            p = float(np.mean(totals >= w_plus - 1e-12))
        else:
            lo = np.mean(totals <= w_plus + 1e-12)
            hi = np.mean(totals >= w_plus - 1e-12)
            p = float(min(1.0, 2.0 * min(lo, hi)))
        exact = True
    else:
        mu = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        # tie correction
        _, counts = np.unique(np.abs(d), return_counts=True)
        var -= np.sum(counts ** 3 - counts) / 48.0
        sd = sqrt(var)
        if alternative == "less":
            z = (w_plus - mu) / sd
            p = 0.5 * erfc(-z / sqrt(2))
        elif alternative == "greater":
            z = (w_plus - mu) / sd
            p = 0.5 * erfc(z / sqrt(2))
        else:
            z = abs(w_plus - mu) / sd
            p = erfc(z / sqrt(2))
        p = float(min(1.0, p))
        exact = False

    return WilcoxonResult(
        statistic=min(w_plus, w_minus),
        w_minus=w_minus,
        w_plus=w_plus,
        n_used=n,
        p_value=p,
        exact=exact,
        alternative=alternative,
    )
