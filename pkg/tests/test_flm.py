import numpy as np
import pytest
from scipy import stats

from funcassoc.exceptions import ShapeError
from funcassoc.flm import FLMTest, flm_design_matrix, flm_permutation_statistics, flm_test, flm_wald
from funcassoc.splines import CurveGrid, bspline_basis_matrix, make_grid, make_knots

from .oracles import basis_by_recursion


def dense_wald(w, y):
    """Textbook OLS Wald test of all slopes with an explicit inverse."""
    x = np.c_[np.ones(len(y)), w]
    xtx_inv = np.linalg.inv(x.T @ x)
    b = xtx_inv @ x.T @ y
    resid = y - x @ b
    sigma2 = resid @ resid / (len(y) - x.shape[1])
    slopes = b[1:]
    cov = sigma2 * xtx_inv[1:, 1:]
    return float(slopes @ np.linalg.solve(cov, slopes))


def test_wald_matches_dense_ols(rng):
    w = rng.normal(size=(60, 5))
    y = (rng.random(60) < 0.5).astype(float)
    res = flm_wald(w, y)
    assert res.t_q == pytest.approx(dense_wald(w, y), rel=1e-9)
    assert res.k_beta == 5
    assert res.p_chisq == pytest.approx(stats.chi2.sf(res.t_q, 5), rel=1e-12)


def test_design_matrix_uses_trapezoid_integrals(rng):
    m = 41
    t = make_grid(m)
    values = rng.normal(size=(3, m))
    basis = make_knots([0.0, 1.0], "small")
    theta = basis_by_recursion(basis.interior_knots, basis.order, t)
    w_trap = np.full(m, 1.0 / (m - 1))
    w_trap[[0, -1]] /= 2
    expected = values @ (w_trap[:, None] * theta)
    np.testing.assert_allclose(flm_design_matrix(CurveGrid(t, values), basis), expected, atol=1e-12)
    np.testing.assert_allclose(bspline_basis_matrix(basis, t), theta, atol=1e-12)


def test_rank_deficient_design(rng):
    w = rng.normal(size=(40, 3))
    w = np.c_[w, w[:, 0] + w[:, 1]]
    y = (rng.random(40) < 0.5).astype(float)
    res = flm_wald(w, y)
    assert "rank_deficient" in res.flags and res.k_beta == 3
    assert res.t_q == pytest.approx(dense_wald(w[:, :3], y), rel=1e-9)


def test_constant_response_and_shape_errors(rng):
    w = rng.normal(size=(20, 3))
    res = flm_wald(w, np.ones(20))
    assert res.t_q == 0 and res.p_chisq == 1 and "constant_response" in res.flags
    with pytest.raises(ShapeError):
        flm_wald(w, np.ones(19))
    with pytest.raises(ShapeError):
        flm_wald(rng.normal(size=(4, 3)), np.array([0, 1, 0, 1.0]))


def test_permutation_matches_refitting(rng):
    w = rng.normal(size=(30, 4))
    y = (rng.random(30) < 0.4).astype(float)
    fast = flm_permutation_statistics(w, y, 25, seed=5)
    perms = np.random.default_rng(5).permuted(np.broadcast_to(y, (25, 30)), axis=1)
    slow = [dense_wald(w, p) for p in perms]
    np.testing.assert_allclose(fast, slow, rtol=1e-9)


def test_permutation_pvalue_uses_le_direction(rng):
    grid = CurveGrid(make_grid(20), rng.normal(size=(40, 20)))
    y = np.repeat([0.0, 1.0], 20)
    res = flm_test(grid, y, n_permutations=199, seed=2)
    w = flm_design_matrix(grid)
    t_perm = flm_permutation_statistics(w, y, 199, seed=2)
    p_obs = stats.chi2.sf(res.t_q, res.k_beta)
    p_perm = stats.chi2.sf(t_perm, res.k_beta)
    assert res.p_permutation == pytest.approx((1 + np.sum(p_perm <= p_obs)) / 200)


def test_strong_signal_is_detected(rng):
    grid = CurveGrid(make_grid(30), rng.normal(size=(80, 30)))
    y = (grid.values[:, 10:20].mean(axis=1) > 0).astype(float)
    assert flm_test(grid, y, n_permutations=0).p_chisq < 1e-6


def test_estimator(rng):
    x = rng.normal(size=(50, 25))
    y = (rng.random(50) < 0.5).astype(float)
    est = FLMTest(n_permutations=49, random_state=1).fit(x, y)
    assert 0 < est.pvalue_ <= 1 and est.n_features_in_ == 25
    assert est.get_params()["n_knots"] == 6
