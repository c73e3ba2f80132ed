import numpy as np
import pytest
from scipy import stats

from funcassoc.exceptions import ShapeError
from funcassoc.skatlite import (
    SkatLiteTest,
    skat_permutation_pvalue,
    skat_permutation_statistics,
    skat_satterthwaite_pvalue,
    skatlite_test,
    trend_statistics,
)

from .conftest import random_codes
from .oracles import trend_chi2_from_table


def test_trend_matches_contingency_table(rng):
    for _ in range(30):
        codes = random_codes(rng, 37, 6)
        y = (rng.random(37) < 0.45).astype(int)
        y[:2] = [0, 1]
        expected = [trend_chi2_from_table(codes[:, j], y) for j in range(6)]
        np.testing.assert_allclose(trend_statistics(codes, y), expected, rtol=1e-10)


def test_single_variant_textbook_case():
    # cases carry more minor alleles; 2 x 3 table: cases (2, 3, 5), controls (6, 3, 1)
    g = np.array([0] * 2 + [1] * 3 + [2] * 5 + [0] * 6 + [1] * 3 + [2] * 1, dtype=float)[:, None]
    y = np.r_[np.ones(10), np.zeros(10)]
    # U = sum g (y - 1/2) = (13 - 5)/2 = 4 ; SS = sum g^2 - 20 * 0.9^2 = 13.8 ; V = 0.25 * 13.8
    assert trend_statistics(g, y)[0] == pytest.approx(16 / (0.25 * 13.8))


def test_monomorphic_variant_contributes_zero(rng):
    codes = random_codes(rng, 20, 4)
    codes[:, 1] = 1.0
    y = np.repeat([0, 1], 10)
    assert trend_statistics(codes, y)[1] == 0.0
    assert "zero_variance_variant" in skatlite_test(codes, y, 0).flags


def test_invalid_response(rng):
    codes = random_codes(rng, 10, 3)
    with pytest.raises(ShapeError):
        trend_statistics(codes, np.arange(10))
    with pytest.raises(ShapeError):
        trend_statistics(codes, np.zeros(9))


def test_q_is_sum_and_relabel_invariant(rng):
    codes = random_codes(rng, 30, 8)
    y = np.repeat([0, 1], 15)
    res = skatlite_test(codes, y, 0)
    assert res.q == pytest.approx(trend_statistics(codes, y).sum())
    flipped = codes.copy()
    flipped[:, [1, 4]] = 2 - flipped[:, [1, 4]]
    assert skatlite_test(flipped, y, 0).q == pytest.approx(res.q, rel=1e-12)


def test_permutations_match_direct_loop(rng):
    codes = random_codes(rng, 24, 5)
    y = np.repeat([0, 1], 12)
    fast = skat_permutation_statistics(codes, y, 30, seed=9)
    perms = np.random.default_rng(9).permuted(np.broadcast_to(y, (30, 24)), axis=1)
    slow = [sum(trend_chi2_from_table(codes[:, j], p) for j in range(5)) for p in perms]
    np.testing.assert_allclose(fast, slow, rtol=1e-10)
    p = skat_permutation_pvalue(codes, y, 30, seed=9)
    q = trend_statistics(codes, y).sum()
    assert p == pytest.approx((1 + np.sum(np.array(slow) >= q * (1 - 1e-12))) / 31)


def test_satterthwaite_under_independence():
    # one variant: Q is a single trend chi-square, so the approximation is chi2_1 up to n/(n-1)
    rng = np.random.default_rng(1)
    g = rng.integers(0, 3, size=(200, 1)).astype(float)
    y = np.repeat([0, 1], 100)
    q = trend_statistics(g, y)[0]
    scale = 200 / 199
    assert skat_satterthwaite_pvalue(g, y) == pytest.approx(stats.chi2.sf(q / scale, 1), rel=1e-10)


def test_satterthwaite_size_is_reasonable():
    rng = np.random.default_rng(4)
    g = rng.integers(0, 3, size=(100, 10)).astype(float)
    ps = [skat_satterthwaite_pvalue(g, rng.permutation(np.repeat([0, 1], 50))) for _ in range(400)]
    assert 0.02 <= np.mean(np.array(ps) <= 0.05) <= 0.09


def test_estimator(rng):
    codes = random_codes(rng, 40, 6)
    y = np.repeat([0, 1], 20)
    est = SkatLiteTest(n_permutations=99, random_state=3).fit(codes, y)
    assert est.pvalue_ == skatlite_test(codes, y, 99, 3).p_permutation
    assert SkatLiteTest(n_permutations=0, satterthwaite=True).fit(codes, y).pvalue_ > 0
