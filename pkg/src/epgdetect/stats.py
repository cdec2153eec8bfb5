"""Two-sample statistics for comparing score distributions."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import special
from scipy import stats as sps

EXACT_MAX_N = 12


class DegenerateStatisticError(ValueError):
    """The statistic is undefined for this input (e.g. zero variance)."""


def cohens_d(a, b) -> float:
    """Standardised mean difference with the pooled (n-1 weighted) SD."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("cohens_d needs at least two values per sample")
    na, nb = a.size, b.size
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    if pooled == 0:
        if a.mean() == b.mean():
            return 0.0
        raise DegenerateStatisticError("zero pooled variance with different means")
    return float((a.mean() - b.mean()) / math.sqrt(pooled))


def _u_statistic(ranks, na):
    return float(ranks[:na].sum() - na * (na + 1) / 2.0)


def rank_sum_test(a, b) -> tuple[float, float]:
    """Mann-Whitney U of ``a`` (count of a > b pairs, ties count half) and two-sided p.

    For ``len(a) + len(b) <= 12`` the p-value enumerates every relabelling
    of the pooled midranks; otherwise a tie-corrected normal approximation
    with continuity correction is used.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = a.size, b.size
    if na < 1 or nb < 1:
        raise ValueError("rank_sum_test needs nonempty samples")
    pooled = np.concatenate([a, b])
    ranks = sps.rankdata(pooled)
    u = _u_statistic(ranks, na)
    mean_u = na * nb / 2.0
    n = na + nb
    if n <= EXACT_MAX_N:
        return u, exact_rank_sum_p(ranks, na)
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts))
    var_u = na * nb / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var_u <= 0:
        return u, 1.0
    z = max(abs(u - mean_u) - 0.5, 0.0) / math.sqrt(var_u)
    return u, float(min(1.0, 2.0 * special.ndtr(-z)))


def exact_rank_sum_p(ranks, na: int) -> float:
    """Two-sided permutation p: share of splits with |U - mean| >= observed."""
    ranks = np.asarray(ranks, dtype=np.float64)
    n = ranks.size
    mean_u = na * (n - na) / 2.0
    obs = abs(_u_statistic(ranks, na) - mean_u)
    offset = na * (na + 1) / 2.0
    hits = total = 0
    for combo in itertools.combinations(range(n), na):
        dev = abs(ranks[list(combo)].sum() - offset - mean_u)
        hits += dev >= obs - 1e-9
        total += 1
    return hits / total


def pooled_t(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.size, b.size
    sp2 = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    return float((a.mean() - b.mean()) / math.sqrt(sp2 * (1 / na + 1 / nb)))


def anova_f(*groups) -> tuple[float, float]:
    """One-way ANOVA F and its upper-tail p from the F distribution."""
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2 or any(g.size < 2 for g in groups):
        raise ValueError("anova_f needs at least two groups of two values")
    k = len(groups)
    n = sum(g.size for g in groups)
    grand = np.concatenate(groups).mean()
    ss_between = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in groups)
    df_b, df_w = k - 1, n - k
    if ss_within == 0:
        if ss_between == 0:
            raise DegenerateStatisticError("all values identical: F undefined")
        return float("inf"), 0.0
    f = (ss_between / df_b) / (ss_within / df_w)
    return float(f), float(sps.f.sf(f, df_b, df_w))
