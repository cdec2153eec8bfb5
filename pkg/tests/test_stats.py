import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from epgdetect.stats import DegenerateStatisticError, anova_f, cohens_d, pooled_t, rank_sum_test


def pairs_u(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    diff = a[:, None] - b[None, :]
    return (diff > 0).sum() + 0.5 * (diff == 0).sum()


def permutation_p(a, b):
    """Two-sided p by relabelling every split, U recomputed from pairs."""
    pooled = np.r_[a, b]
    na, n = len(a), len(pooled)
    mean = na * (n - na) / 2
    obs = abs(pairs_u(a, b) - mean)
    hits = total = 0
    for idx in itertools.combinations(range(n), na):
        mask = np.zeros(n, bool)
        mask[list(idx)] = True
        hits += abs(pairs_u(pooled[mask], pooled[~mask]) - mean) >= obs - 1e-9
        total += 1
    return hits / total


# -- Cohen's d ------------------------------------------------------------------------


def test_cohens_d_direct_formula():
    a = np.array([2.0, 4.0, 6.0, 9.0])
    b = np.array([1.0, 2.0, 2.5, 3.0, 4.5])
    sp = math.sqrt(((len(a) - 1) * a.var(ddof=1) + (len(b) - 1) * b.var(ddof=1)) / (len(a) + len(b) - 2))
    assert cohens_d(a, b) == pytest.approx((a.mean() - b.mean()) / sp, abs=1e-12)
    assert cohens_d(b, a) == pytest.approx(-cohens_d(a, b), abs=1e-12)


def test_cohens_d_unit_shift():
    a = np.array([-1.0, 1.0]) + 1.0  # sample sd 1.414
    b = np.array([-1.0, 1.0])
    assert cohens_d(a, b) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_cohens_d_degenerate():
    assert cohens_d([3, 3, 3], [3, 3]) == 0.0
    with pytest.raises(DegenerateStatisticError):
        cohens_d([1, 1], [2, 2])
    with pytest.raises(ValueError):
        cohens_d([1], [2, 3])


# -- rank-sum -------------------------------------------------------------------------


def test_rank_sum_extremes():
    u, p = rank_sum_test([10, 11, 12, 13, 14], [1, 2, 3, 4, 5])
    assert u == 25
    assert p == pytest.approx(2 / math.comb(10, 5), abs=1e-15)
    u, _ = rank_sum_test([1, 2, 3, 4, 5], [10, 11, 12, 13, 14])
    assert u == 0


def test_rank_sum_identical_samples():
    a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]
    u, p = rank_sum_test(a, a)
    assert u == pytest.approx(len(a) ** 2 / 2)
    assert p == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=6), st.lists(st.integers(0, 5), min_size=1, max_size=6))
def test_exact_p_matches_permutation_oracle(a, b):
    u, p = rank_sum_test(a, b)
    assert u == pairs_u(a, b)
    assert p == pytest.approx(permutation_p(np.array(a, float), np.array(b, float)), abs=1e-12)


def test_exact_p_matches_scipy_without_ties():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.permutation(12).astype(float)
        a, b = x[:5], x[5:]
        expected = sps.mannwhitneyu(a, b, alternative="two-sided", method="exact").pvalue
        assert rank_sum_test(a, b)[1] == pytest.approx(expected, abs=1e-12)


def test_normal_approximation_matches_scipy():
    rng = np.random.default_rng(1)
    for n_a, n_b in [(20, 30), (100, 80), (7, 40)]:
        a = np.round(rng.normal(0.3, 1, n_a), 1)  # rounding creates ties
        b = np.round(rng.normal(0.0, 1, n_b), 1)
        u, p = rank_sum_test(a, b)
        ref = sps.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
        assert u == ref.statistic
        assert p == pytest.approx(ref.pvalue, rel=1e-10)


def test_rank_sum_all_tied_large():
    u, p = rank_sum_test(np.ones(10), np.ones(10))
    assert u == 50 and p == 1.0


# -- ANOVA ---------------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=20), st.lists(st.floats(-100, 100), min_size=3, max_size=20))
def test_two_group_f_is_t_squared(a, b):
    a, b = np.array(a), np.array(b)
    if np.ptp(a) < 1e-3 or np.ptp(b) < 1e-3:
        return
    f, _ = anova_f(a, b)
    t = pooled_t(a, b)
    assert f == pytest.approx(t * t, rel=1e-9, abs=1e-9)


def test_anova_matches_scipy():
    rng = np.random.default_rng(2)
    groups = [rng.normal(m, 1, n) for m, n in ((0, 10), (0.5, 15), (1, 8))]
    f, p = anova_f(*groups)
    ref = sps.f_oneway(*groups)
    assert f == pytest.approx(ref.statistic, rel=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_anova_large_shift():
    rng = np.random.default_rng(3)
    f, p = anova_f(rng.normal(0, 1, 100), rng.normal(10, 1, 100))
    assert p < 1e-25 and f > 1000


def test_anova_degenerate():
    assert anova_f([1, 1], [2, 2]) == (float("inf"), 0.0)
    with pytest.raises(DegenerateStatisticError):
        anova_f([1, 1], [1, 1])
    with pytest.raises(ValueError):
        anova_f([1, 2])
