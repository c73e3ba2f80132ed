import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from funcassoc.exceptions import DegenerateCovariance, DegenerateDenominator, GroupError, NumericError, ZeroWithinDf
from funcassoc.fanova import (
    FanovaTest,
    f_from_distances,
    f_sf,
    fanova_asymptotic_pvalue,
    fanova_components,
    fanova_f_statistic,
    fanova_test,
    group_function_stats,
    permutation_f_values,
    permutation_pvalue,
    satterthwaite_kappa,
    squared_distance_matrix,
)
from funcassoc.genotype import Phenotype
from funcassoc.splines import CurveGrid, make_grid, trapezoid_weights


def curves(rng, n, m=30):
    t = make_grid(m)
    return CurveGrid(t, rng.normal(size=(n, 3)) @ np.vstack([np.ones(m), t, np.sin(5 * t)]) + rng.normal(size=(n, m)))


def naive_pooled_cov(values, labels):
    n, m = values.shape
    k = labels.max() + 1
    cov = np.zeros((m, m))
    for g in range(k):
        rows = values[labels == g]
        mu = rows.mean(axis=0)
        for row in rows:
            for a in range(m):
                for b in range(m):
                    cov[a, b] += (row[a] - mu[a]) * (row[b] - mu[b])
    return cov / (n - k)


def direct_f(values, labels, w):
    """Between / within integrated variation, written out group by group."""
    k = labels.max() + 1
    n = labels.size
    grand = values.mean(axis=0)
    between = sum((labels == g).sum() * w @ (values[labels == g].mean(axis=0) - grand) ** 2 for g in range(k))
    within = sum(w @ ((r - values[labels == g].mean(axis=0)) ** 2) for g in range(k) for r in values[labels == g])
    return (between / (k - 1)) / (within / (n - k))


# -- estimators --------------------------------------------------------------------


def test_pooled_cov_matches_double_loop(rng):
    grid = curves(rng, 9, m=6)
    ph = Phenotype(np.array([0, 0, 0, 1, 1, 2, 2, 2, 2]))
    s = group_function_stats(grid, ph)
    np.testing.assert_allclose(s.pooled_cov, naive_pooled_cov(grid.values, ph.labels), atol=1e-10)
    np.testing.assert_allclose(s.grand_mean, grid.values.mean(axis=0))


def test_identical_rows_give_zero_cov():
    grid = CurveGrid(make_grid(5), np.tile(np.arange(5.0), (4, 1)))
    s = group_function_stats(grid, Phenotype(np.array([0, 0, 1, 1])))
    np.testing.assert_allclose(s.group_means, s.grand_mean[None, :].repeat(2, 0))
    assert np.all(s.pooled_cov == 0)


def test_group_errors():
    grid = CurveGrid(make_grid(4), np.zeros((2, 4)))
    with pytest.raises(ZeroWithinDf):
        group_function_stats(grid, Phenotype(np.array([0, 1])))
    with pytest.raises(GroupError):
        Phenotype(np.array([0, 0, 2]))
    with pytest.raises(GroupError):
        group_function_stats(CurveGrid(make_grid(4), np.zeros((3, 4))), Phenotype(np.array([0, 0, 0])))


# -- F statistic ---------------------------------------------------------------------


def test_f_matches_direct_formula(rng):
    grid = curves(rng, 20)
    ph = Phenotype(np.repeat([0, 1, 2, 3], 5))
    f = fanova_f_statistic(group_function_stats(grid, ph), grid, ph)
    assert f == pytest.approx(direct_f(grid.values, ph.labels, grid.weights), rel=1e-12)


def test_denominator_forms_agree(rng):
    for _ in range(20):
        grid = curves(rng, 15)
        ph = Phenotype(rng.permutation(np.repeat([0, 1, 2], 5)))
        _, raw, diag = fanova_components(group_function_stats(grid, ph), grid, ph)
        assert raw == pytest.approx(diag, rel=1e-10)


def test_identical_group_means_give_zero(rng):
    base = rng.normal(size=(3, 10))
    values = np.vstack([base, base])
    ph = Phenotype(np.repeat([0, 1], 3))
    grid = CurveGrid(make_grid(10), values)
    assert fanova_f_statistic(group_function_stats(grid, ph), grid, ph) == pytest.approx(0.0, abs=1e-14)


def test_constant_curves_hand_computation():
    # group 0 sits at level 0, group 1 at level 1, each with +-e noise
    e = 0.5
    values = np.array([[-e], [e], [1 - e], [1 + e]]) * np.ones((1, 11))
    grid = CurveGrid(make_grid(11), values)
    ph = Phenotype(np.array([0, 0, 1, 1]))
    # between: 2*(0.5^2) + 2*(0.5^2) = 1 ; within: 4 e^2 / (n-k=2) = 2 e^2
    assert fanova_f_statistic(group_function_stats(grid, ph), grid, ph) == pytest.approx(1.0 / (2 * e * e))


def test_scale_invariance(rng):
    grid = curves(rng, 12)
    ph = Phenotype(np.repeat([0, 1], 6))
    f1 = fanova_test(grid, ph).f_stat
    f2 = fanova_test(CurveGrid(grid.grid_points, -3.7 * grid.values), ph).f_stat
    assert f1 == pytest.approx(f2, rel=1e-12)


def test_degenerate_cases():
    ph = Phenotype(np.array([0, 0, 1, 1]))
    flat = CurveGrid(make_grid(5), np.ones((4, 5)))
    res = fanova_test(flat, ph, n_permutations=9)
    assert res.f_stat == 0 and res.p_asymptotic == 1 and "degenerate_zero_variation" in res.flags
    split = CurveGrid(make_grid(5), np.array([[0.0] * 5, [0.0] * 5, [1.0] * 5, [1.0] * 5]))
    with pytest.raises(DegenerateDenominator):
        fanova_test(split, ph)
    with pytest.raises(DegenerateDenominator):
        f_from_distances(squared_distance_matrix(split), ph)
    assert f_from_distances(squared_distance_matrix(flat), ph) == 0.0


# -- kappa and the F tail ----------------------------------------------------------------


def test_kappa_identity_and_rank_one(rng):
    a = satterthwaite_kappa(np.eye(17))
    assert a.kappa == 17.0 and a.c == 1.0
    v = rng.normal(size=9)
    assert satterthwaite_kappa(np.outer(v, v)).kappa == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(DegenerateCovariance):
        satterthwaite_kappa(np.zeros((3, 3)))


def test_kappa_equals_eigenvalue_form(rng):
    x = rng.normal(size=(40, 12)) * np.linspace(3, 0.1, 12)
    cov = np.cov(x, rowvar=False)
    lam = np.linalg.eigvalsh(cov)
    a = satterthwaite_kappa(cov)
    assert a.kappa == pytest.approx(lam.sum() ** 2 / (lam**2).sum(), rel=1e-12)
    assert a.c == pytest.approx((lam**2).sum() / lam.sum(), rel=1e-12)


def test_fanova_kappa_from_residuals_matches_pooled_cov(rng):
    grid = curves(rng, 14)
    ph = Phenotype(np.repeat([0, 1], 7))
    expected = satterthwaite_kappa(group_function_stats(grid, ph).pooled_cov).kappa
    res = fanova_test(grid, ph)
    assert res.kappa == pytest.approx(expected, rel=1e-10)
    assert res.df1 == pytest.approx(expected) and res.df2 == pytest.approx(12 * expected)


def test_satterthwaite_matches_mixture_by_monte_carlo():
    lam = 0.7 ** np.arange(15)
    a = satterthwaite_kappa(np.diag(lam))
    # the approximation matches the first two moments exactly
    assert a.c * a.kappa == pytest.approx(lam.sum())
    assert 2 * a.c**2 * a.kappa == pytest.approx(2 * (lam**2).sum())
    draws = np.random.default_rng(7).chisquare(1, size=(400_000, lam.size)) @ lam
    q_mc = np.quantile(draws, 0.95)
    q_approx = a.c * stats.chi2.ppf(0.95, a.kappa)
    assert abs(q_approx / q_mc - 1) < 0.03


@pytest.mark.parametrize("f,d1,d2", [(0.5, 1.3, 7.9), (2.0, 4.4, 100.2), (1.0, 30, 300), (7.5, 0.7, 12)])
def test_f_tail_matches_scipy(f, d1, d2):
    assert f_sf(f, d1, d2) == pytest.approx(stats.f.sf(f, d1, d2), rel=1e-12)


def test_asymptotic_pvalue_edges():
    assert fanova_asymptotic_pvalue(0.0, 2, 50, 3.0) == 1.0
    assert fanova_asymptotic_pvalue(1e6, 2, 50, 3.0) < 1e-10
    with pytest.raises(NumericError):
        fanova_asymptotic_pvalue(float("nan"), 2, 50, 3.0)


# -- distances and permutations ----------------------------------------------------------


def test_distance_matrix_properties():
    t = make_grid(101)
    values = np.vstack([np.full(101, 2.0), np.full(101, -1.0), t**2])
    d2 = squared_distance_matrix(CurveGrid(t, values))
    assert d2[0, 1] == pytest.approx(9.0)
    np.testing.assert_array_equal(np.diag(d2), 0)
    np.testing.assert_allclose(d2, d2.T)
    # int (t^2 - 2)^2 = 1/5 - 4/3 + 4 ; trapezoid error is O(M^-2)
    assert abs(d2[0, 2] - (0.2 - 4 / 3 + 4)) < 1.0 / 101**2


def test_distance_form_equals_direct_f(rng):
    for _ in range(100):
        grid = curves(rng, int(rng.integers(6, 25)))
        labels = rng.integers(0, 3, size=grid.n_subjects)
        labels[:3] = [0, 1, 2]
        ph = Phenotype(labels)
        direct = direct_f(grid.values, labels, grid.weights)
        assert f_from_distances(squared_distance_matrix(grid), ph) == pytest.approx(direct, rel=1e-8)


def test_label_shuffle_equals_matrix_shuffle(rng):
    grid = curves(rng, 10)
    ph = Phenotype(np.repeat([0, 1], 5))
    d2 = squared_distance_matrix(grid)
    for _ in range(10):
        perm = rng.permutation(10)
        by_matrix = f_from_distances(d2[np.ix_(perm, perm)], ph)
        by_labels = f_from_distances(d2, Phenotype(ph.labels[np.argsort(perm)]))
        assert by_matrix == pytest.approx(by_labels, rel=1e-12)


def test_exhaustive_enumeration_n6(rng):
    grid = curves(rng, 6)
    ph = Phenotype(np.array([0, 0, 0, 1, 1, 1]))
    d2 = squared_distance_matrix(grid)
    exact = []
    for case_rows in itertools.combinations(range(6), 3):
        labels = np.zeros(6, dtype=int)
        labels[list(case_rows)] = 1
        exact.append(direct_f(grid.values, labels, grid.weights))
    # complementary assignments give the same F, so the 20 assignments share 10 values
    support = np.unique(np.round(exact, 9))
    assert support.size == 10
    # every matrix shuffle lands on the support, each value equally often
    perm_f = permutation_f_values(d2, ph, 20_000, seed=3)
    idx = np.abs(perm_f[:, None] - support[None, :]).argmin(axis=1)
    np.testing.assert_allclose(perm_f, support[idx], rtol=1e-8)
    freq = np.bincount(idx, minlength=10) / perm_f.size
    assert np.all(np.abs(freq - 1 / 10) < 0.01)


def test_add_one_rule(rng):
    grid = CurveGrid(make_grid(4), np.vstack([np.zeros((5, 4)), np.full((5, 4), 10.0)]) + 0.01 * rng.normal(size=(10, 4)))
    ph = Phenotype(np.repeat([0, 1], 5))
    d2 = squared_distance_matrix(grid)
    # only the identity and the swap reproduce the observed split
    p = permutation_pvalue(d2, ph, 99, seed=1)
    assert p == pytest.approx((1 + np.sum(permutation_f_values(d2, ph, 99, seed=1) >= f_from_distances(d2, ph) * (1 - 1e-12))) / 100)
    assert p <= 0.05


def test_permutations_are_seeded(rng):
    grid = curves(rng, 12)
    ph = Phenotype(np.repeat([0, 1], 6))
    a = fanova_test(grid, ph, 50, seed=11)
    b = fanova_test(grid, ph, 50, seed=11)
    assert a.p_permutation == b.p_permutation and a.permutations_used == 50
    assert set(a.to_dict()) >= {"f", "kappa", "df1", "df2", "p_asymptotic", "p_permutation", "I", "flags"}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_property_two_routes_agree(seed, k):
    rng = np.random.default_rng(seed)
    n = k + int(rng.integers(2, 12))
    labels = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
    grid = CurveGrid(make_grid(8), rng.normal(size=(n, 8)))
    ph = Phenotype(labels)
    f = fanova_test(grid, ph).f_stat
    assert f == pytest.approx(f_from_distances(squared_distance_matrix(grid), ph), rel=1e-8)
    assert 0.0 <= fanova_test(grid, ph).p_asymptotic <= 1.0


def test_estimator_wrapper(rng):
    grid = curves(rng, 16)
    y = np.repeat(["a", "b"], 8)
    est = FanovaTest().fit(grid.values, y)
    assert est.pvalue_ == pytest.approx(fanova_test(grid, Phenotype(np.repeat([0, 1], 8))).p_asymptotic)
    assert est.get_params() == {"n_permutations": 0, "random_state": None}
    assert np.allclose(trapezoid_weights(grid.grid_points).sum(), 1.0)
