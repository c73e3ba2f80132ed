"""Functional linear model comparator.

A scalar (here binary) response is regressed on the integral of the genotype
curve against a coefficient function ``beta(t) = sum_k b_k theta_k(t)``. That
reduces to ordinary least squares on the design ``W[i, k] = int X_i theta_k``;
the slope block is tested with a Wald statistic and calibrated by permuting
the response.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg, stats
from sklearn.base import BaseEstimator

from ._perm import add_one_pvalue, chunks, permuted_copies
from .exceptions import ShapeError
from .splines import BasisSpec, CurveGrid, bspline_basis_matrix, make_grid, make_knots, trapezoid_weights

DEFAULT_PERMUTATIONS = 999


def default_beta_basis() -> BasisSpec:
    """Cubic B-splines on six equally spaced interior knots (10 functions)."""
    return make_knots([0.0, 1.0], "small")


@dataclass
class FlmResult:
    t_q: float
    k_beta: int
    p_chisq: float
    p_permutation: float | None = None
    permutations_used: int = 0
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["I"] = out.pop("permutations_used")
        return out


def flm_design_matrix(grid, beta_basis: BasisSpec | None = None) -> np.ndarray:
    """``W[i, k] = int X_i(t) theta_k(t) dt`` by the trapezoid rule on the grid."""
    beta_basis = beta_basis or default_beta_basis()
    if isinstance(grid, CurveGrid):
        values, points = grid.values, grid.grid_points
    else:
        values = np.asarray(grid, dtype=float)
        points = make_grid(values.shape[1])
    theta = bspline_basis_matrix(beta_basis, points)
    return values @ (trapezoid_weights(points)[:, None] * theta)


class _WaldProjector:
    """Precomputed pieces for Wald statistics of many responses on one design.

    For OLS with an intercept, the Wald statistic of the slope block equals
    ``(RSS_0 - RSS_1) / sigma2`` where ``RSS_0`` is the intercept-only residual
    sum of squares. Both sums only need the orthonormal basis of the centered
    design, which is shared by every permuted response.
    """

    def __init__(self, w: np.ndarray):
        w = np.asarray(w, dtype=float)
        n, k = w.shape
        wc = w - w.mean(axis=0)
        q, r, _ = linalg.qr(wc, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        tol = max(n, k) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
        self.rank = int(np.sum(diag > tol))
        self.q = q[:, : self.rank]
        self.n, self.k = n, k

    def statistics(self, y: np.ndarray):
        """Wald statistics and residual variances for rows of ``y``."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        yc = y - y.mean(axis=1, keepdims=True)
        tss = np.einsum("ij,ij->i", yc, yc)
        proj = yc @ self.q
        ess = np.einsum("ij,ij->i", proj, proj)
        rss = np.maximum(tss - ess, 0.0)
        sigma2 = rss / (self.n - 1 - self.rank)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(ess > 0, ess / sigma2, 0.0)
        return t, sigma2, tss


def flm_wald(w, y) -> FlmResult:
    """OLS of ``y`` on ``[1 | W]`` and the Wald test of all slopes.

    A rank-deficient design is fitted in its numerical column space and the
    chi-square degrees of freedom drop to that rank (flag ``rank_deficient``).
    """
    w = np.asarray(w, dtype=float)
    y = np.asarray(y, dtype=float)
    if w.ndim != 2 or w.shape[0] != y.size:
        raise ShapeError("design rows must match the number of responses")
    n, k = w.shape
    if n <= k + 1:
        raise ShapeError(f"need more subjects than basis functions + 1 (n={n}, K={k})")
    proj = _WaldProjector(w)
    t, sigma2, tss = proj.statistics(y)
    t, sigma2, tss = float(t[0]), float(sigma2[0]), float(tss[0])
    flags = []
    df = proj.rank
    if proj.rank < k:
        flags.append("rank_deficient")
    if tss <= 0:
        flags.append("constant_response")
        return FlmResult(0.0, df, 1.0, flags=flags)
    if sigma2 <= 1e-14 * tss / n:
        flags.append("perfect_fit")
        return FlmResult(float("inf"), df, 0.0, flags=flags)
    if df == 0:
        return FlmResult(0.0, 0, 1.0, flags=flags)
    return FlmResult(t, df, float(stats.chi2.sf(t, df)), flags=flags)


def flm_permutation_statistics(w, y, n_permutations=DEFAULT_PERMUTATIONS, seed=None) -> np.ndarray:
    proj = _WaldProjector(w)
    perms = permuted_copies(np.asarray(y, dtype=float), n_permutations, seed)
    out = np.empty(n_permutations)
    for sl in chunks(n_permutations, 1024):
        out[sl] = proj.statistics(perms[sl])[0]
    return out


def flm_permutation_pvalue(w, y, n_permutations=DEFAULT_PERMUTATIONS, seed=None) -> float:
    """``(#{p_perm <= p_obs} + 1) / (I + 1)`` over permuted responses.

    The chi-square p-value is a decreasing function of the Wald statistic at
    fixed degrees of freedom, so the comparison is made on the statistics,
    which avoids underflow for very small p-values.
    """
    observed = flm_wald(w, y)
    t_perm = flm_permutation_statistics(w, y, n_permutations, seed)
    n_extreme = np.sum(t_perm >= observed.t_q * (1.0 - 1e-12))
    return add_one_pvalue(n_extreme, n_permutations)


def flm_test(grid, y, beta_basis=None, n_permutations=DEFAULT_PERMUTATIONS, seed=None) -> FlmResult:
    w = flm_design_matrix(grid, beta_basis)
    result = flm_wald(w, y)
    if n_permutations:
        t_perm = flm_permutation_statistics(w, y, n_permutations, seed)
        result.p_permutation = add_one_pvalue(np.sum(t_perm >= result.t_q * (1.0 - 1e-12)), n_permutations)
        result.permutations_used = int(n_permutations)
    return result


class FLMTest(BaseEstimator):
    """Estimator wrapper around :func:`flm_test`.

    ``X`` holds curves sampled on an equally spaced grid over [0, 1].
    """

    def __init__(self, n_knots=6, n_permutations=DEFAULT_PERMUTATIONS, random_state=None):
        self.n_knots = n_knots
        self.n_permutations = n_permutations
        self.random_state = random_state

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        basis = make_knots([0.0, 1.0], "small", n_small_knots=self.n_knots)
        self.result_ = flm_test(X, y, basis, self.n_permutations, self.random_state)
        self.statistic_ = self.result_.t_q
        self.pvalue_ = (self.result_.p_permutation if self.n_permutations
                        else self.result_.p_chisq)
        self.n_features_in_ = X.shape[1]
        return self
