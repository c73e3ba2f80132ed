"""B-spline bases, roughness penalties and per-subject penalized smoothing.

Each subject's genotype sequence is turned into a curve ``y(t) = sum_k b_k phi_k(t)``
on [0, 1]. Three knot layouts are supported:

``small``
    six equally spaced interior knots, no penalty.
``everyother``
    a knot at every second variant position, no penalty.
``penalized``
    a knot at every variant position with a second-derivative penalty whose
    weight is chosen per subject by generalized cross validation (GCV).

Unpenalized fits are least squares (minimum-norm when the basis outnumbers the
observed points). Penalized fits go through a spectral decomposition that is
computed once per missingness pattern, so scanning hundreds of smoothing
parameters costs O(n) per subject.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import BasisError, DomainError, GcvError, GridError, InsufficientData

STRATEGIES = ("small", "everyother", "penalized")
_STRATEGY_ALIASES = {
    "smallfixed": "small",
    "everyotherposition": "everyother",
    "penalizedfull": "penalized",
}

LAMBDA_BOUNDS = (1e-16, 1e3)
N_LAMBDA_GRID = 200
GOLDEN_ITERATIONS = 40
# GCV is only trusted where n - tr H >= max(1, MIN_RESIDUAL_FRACTION * n). Near
# the interpolation limit both RSS and n - tr H go to zero and the ratio settles
# on a finite value that can undercut every genuine smoothing optimum, giving
# curves with wild excursions between closely spaced variants.
MIN_RESIDUAL_FRACTION = 0.05


def min_residual_df(n: int) -> float:
    return max(1.0, MIN_RESIDUAL_FRACTION * n)


def canonical_strategy(strategy: str) -> str:
    key = strategy.lower().replace("_", "").replace("-", "")
    key = _STRATEGY_ALIASES.get(key, key)
    if key not in STRATEGIES:
        raise BasisError(f"unknown smoothing strategy {strategy!r}; choose from {STRATEGIES}")
    return key


@dataclass(frozen=True)
class BasisSpec:
    """Clamped B-spline basis on [0, 1]."""

    interior_knots: np.ndarray
    order: int = 4
    strategy: str = "penalized"

    def __post_init__(self):
        knots = np.asarray(self.interior_knots, dtype=float)
        if knots.ndim != 1:
            raise BasisError("interior knots must be one-dimensional")
        if knots.size and (knots[0] <= 0.0 or knots[-1] >= 1.0 or np.any(np.diff(knots) <= 0)):
            raise BasisError("interior knots must be sorted, distinct and inside (0, 1)")
        if self.order < 1:
            raise BasisError("spline order must be positive")
        knots = knots.copy()
        knots.setflags(write=False)
        object.__setattr__(self, "interior_knots", knots)

    @property
    def n_basis(self) -> int:
        return self.interior_knots.size + self.order

    @property
    def degree(self) -> int:
        return self.order - 1

    @property
    def knot_vector(self) -> np.ndarray:
        o = self.order
        return np.concatenate([np.zeros(o), self.interior_knots, np.ones(o)])

    @property
    def breakpoints(self) -> np.ndarray:
        return np.concatenate([[0.0], self.interior_knots, [1.0]])

    @property
    def penalized(self) -> bool:
        return self.strategy == "penalized"


def make_knots(
    positions: Sequence[float], strategy: str = "penalized", order: int = 4, n_small_knots: int = 6
) -> BasisSpec:
    """Lay out interior knots for one of the three smoothing strategies.

    ``positions`` are normalized variant positions; the endpoints 0 and 1 act
    as boundary knots, so "a knot at every position" means every interior one.
    """
    strategy = canonical_strategy(strategy)
    positions = np.unique(np.asarray(positions, dtype=float))
    if positions.size < 2:
        raise BasisError("at least two distinct variant positions are needed")
    inner = positions[(positions > 0.0) & (positions < 1.0)]
    if strategy == "small":
        knots = np.arange(1, n_small_knots + 1) / (n_small_knots + 1)
    elif strategy == "everyother":
        knots = positions[1:-1:2]
    else:
        knots = inner
    return BasisSpec(knots, order=order, strategy=strategy)


def _check_points(x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1:
        raise DomainError("evaluation points must be one-dimensional")
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise DomainError("evaluation points must lie in [0, 1]")
    return x


def bspline_basis_matrix(spec: BasisSpec, x, deriv: int = 0) -> np.ndarray:
    """Evaluate every basis function (or its ``deriv``-th derivative) at ``x``.

    Returns an array of shape ``(len(x), spec.n_basis)``.
    """
    x = _check_points(x)
    spline = BSpline(spec.knot_vector, np.eye(spec.n_basis), spec.degree, extrapolate=True)
    if deriv:
        if deriv > spec.degree:
            return np.zeros((x.size, spec.n_basis))
        spline = spline.derivative(deriv)
    return spline(x)


def penalty_root(spec: BasisSpec, deriv: int = 2) -> np.ndarray:
    """Matrix ``L`` with ``L.T @ L == penalty_matrix(spec)``.

    Rows are weighted derivative evaluations at Gauss-Legendre nodes. On each
    knot span the integrand is a polynomial of degree ``2 * (order - 1 - deriv)``,
    which ``order - deriv`` nodes integrate exactly.
    """
    nodes, weights = np.polynomial.legendre.leggauss(max(spec.order - deriv, 1))
    breaks = spec.breakpoints
    lo, hi = breaks[:-1], breaks[1:]
    half = (hi - lo)[:, None] / 2.0
    pts = (lo[:, None] + half * (nodes[None, :] + 1.0)).ravel()
    w = (half * weights[None, :]).ravel()
    d = bspline_basis_matrix(spec, np.clip(pts, 0.0, 1.0), deriv=deriv)
    return np.sqrt(w)[:, None] * d


def penalty_matrix(spec: BasisSpec, deriv: int = 2) -> np.ndarray:
    """Roughness penalty ``P[j, k] = int_0^1 phi_j''(t) phi_k''(t) dt`` (exact)."""
    root = penalty_root(spec, deriv)
    pen = root.T @ root
    return (pen + pen.T) / 2.0


@dataclass(frozen=True)
class SmoothCurve:
    """One subject's fitted curve."""

    basis: BasisSpec
    coefficients: np.ndarray
    lam: float = 0.0
    gcv: float = float("nan")
    observed_mask: np.ndarray | None = field(default=None, compare=False)
    hat_trace: float = float("nan")
    rss: float = float("nan")

    def __call__(self, t) -> np.ndarray:
        return bspline_basis_matrix(self.basis, t) @ self.coefficients

    def roughness(self) -> float:
        """Integrated squared second derivative of the curve."""
        b = self.coefficients
        return float(b @ penalty_matrix(self.basis) @ b)


@dataclass(frozen=True)
class CurveGrid:
    """Curves evaluated on ``M`` equally spaced points of [0, 1]."""

    grid_points: np.ndarray
    values: np.ndarray

    @property
    def M(self) -> int:
        return self.grid_points.size

    @property
    def n_subjects(self) -> int:
        return self.values.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.grid_points)


def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    """Quadrature weights so that ``w @ f(grid)`` is the trapezoid integral."""
    grid = np.asarray(grid, dtype=float)
    w = np.zeros_like(grid)
    h = np.diff(grid)
    w[:-1] += h / 2.0
    w[1:] += h / 2.0
    return w


def make_grid(M: int) -> np.ndarray:
    if M < 2:
        raise GridError(f"grid needs at least 2 points, got {M}")
    return np.linspace(0.0, 1.0, int(M))


def default_grid_size(n_variants: int) -> int:
    return max(2 * int(n_variants), 2)


# ---------------------------------------------------------------------------
# single-curve fitting
# ---------------------------------------------------------------------------


def _observed(values, positions):
    values = np.asarray(values, dtype=float)
    positions = np.asarray(positions, dtype=float)
    if values.shape != positions.shape:
        raise InsufficientData("values and positions differ in length")
    mask = ~np.isnan(values)
    if np.unique(positions[mask]).size < 2:
        raise InsufficientData("a curve needs at least two observed points")
    return values[mask], positions[mask], mask


def fit_penalized(values, positions, spec: BasisSpec, lam: float) -> SmoothCurve:
    """Minimize ``||g - Phi b||^2 + lam * b' P b`` over the observed points.

    At ``lam == 0`` the normal system may be singular (more basis functions
    than points); the minimum-norm least-squares solution is returned then.
    """
    if not lam >= 0:
        raise ValueError("smoothing parameter must be non-negative")
    g, x, mask = _observed(values, positions)
    phi = bspline_basis_matrix(spec, x)
    if lam == 0:
        pinv = np.linalg.pinv(phi)
        coef = pinv @ g
        hat_trace = float(np.trace(phi @ pinv))
    else:
        # augmented least squares [Phi; sqrt(lam) L] b ~ [g; 0]; tr H = ||Q_top||^2
        aug = np.vstack([phi, np.sqrt(lam) * penalty_root(spec)])
        q, r = linalg.qr(aug, mode="economic")
        rhs = q[: g.size].T @ g
        coef = linalg.solve_triangular(r, rhs) if _well_posed(r) else linalg.lstsq(r, rhs)[0]
        hat_trace = float(np.sum(q[: g.size] ** 2))
    resid = g - phi @ coef
    rss = float(resid @ resid)
    n = g.size
    resid_df = n - hat_trace
    gcv = n * rss / resid_df**2 if resid_df >= min_residual_df(n) else float("nan")
    return SmoothCurve(spec, coef, float(lam), gcv, mask, hat_trace, rss)


def _well_posed(r: np.ndarray) -> bool:
    diag = np.abs(np.diag(r))
    return diag.size > 0 and diag.min() > 1e-13 * diag.max()


class _SpectralSmoother:
    """Demmler-Reinsch style decomposition for one set of observed positions.

    The fit at any ``lam`` is ``f = sum_i e_i d_i (e_i' g)`` with ``d_i =
    1 / (1 + lam * s_i)`` for an orthonormal set ``e_i``; points outside the
    span of the ``e_i`` (when the basis is smaller than the data) are left as
    residual. ``coef_map`` turns damped projections back into coefficients.
    """

    def __init__(self, phi: np.ndarray, root: np.ndarray):
        n, k = phi.shape
        self.n = n
        if n <= k:
            q, r = linalg.qr(phi.T)
            diag = np.abs(np.diag(r))
            if diag.min() > diag.max() * k * np.finfo(float).eps:
                self._interpolating(q, r, root)
                return
        elif np.linalg.matrix_rank(phi) == k:
            self._regression(phi, root)
            return
        raise np.linalg.LinAlgError("basis is rank deficient at the observed points")

    def _interpolating(self, q, r, root):
        # coefficients of least roughness reproducing fitted values f:
        # b = C f with C = pinv(Phi) + N w, N spanning null(Phi)
        n = r.shape[1]
        pinv = q[:, :n] @ linalg.solve_triangular(r[:n], np.eye(n), trans="T")
        null = q[:, n:]
        a0 = root @ pinv
        if null.shape[1]:
            a1 = root @ null
            w = linalg.lstsq(a1, a0)[0]
            c = pinv - null @ w
            a = a0 - a1 @ w
        else:
            c, a = pinv, a0
        _, sig, vat = linalg.svd(a, full_matrices=False)
        s = np.zeros(n)
        s[: sig.size] = sig**2
        self.s = s
        self.basis_vectors = vat.T
        self.coef_map = c @ vat.T
        self.full_rank = True

    def _regression(self, phi, root):
        q, r = linalg.qr(phi, mode="economic")
        rinv = linalg.solve_triangular(r, np.eye(r.shape[0]))
        _, sig, vat = linalg.svd(root @ rinv, full_matrices=False)
        k = r.shape[0]
        s = np.zeros(k)
        s[: sig.size] = sig**2
        self.s = s
        self.basis_vectors = q @ vat.T
        self.coef_map = rinv @ vat.T
        self.full_rank = phi.shape[0] == k

    def project(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Projections ``z`` (subjects x r) and out-of-span residual norms."""
        z = g @ self.basis_vectors
        if self.full_rank:
            base = np.zeros(g.shape[0])
        else:
            base = np.maximum(np.einsum("ij,ij->i", g, g) - np.einsum("ij,ij->i", z, z), 0.0)
        return z, base

    def gcv(self, lam: np.ndarray, z: np.ndarray, base: np.ndarray):
        """GCV scores for every (lambda, subject) pair -> arrays (L, N)."""
        lam = np.atleast_1d(lam)
        ls = lam[:, None] * self.s[None, :]
        shrink = ls / (1.0 + ls)  # 1 - d_i
        rss = base[None, :] + (shrink**2) @ (z**2).T
        resid_df = (self.n - self.s.size) + shrink.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            score = self.n * rss / (resid_df[:, None] ** 2)
        score = np.where(resid_df[:, None] >= min_residual_df(self.n), score, np.nan)
        return score, rss, self.n - resid_df

    def gcv_pointwise(self, lam: np.ndarray, z: np.ndarray, base: np.ndarray):
        """GCV where each subject has its own lambda -> arrays (N,)."""
        ls = lam[:, None] * self.s[None, :]
        shrink = ls / (1.0 + ls)
        rss = base + np.einsum("ij,ij->i", shrink**2, z**2)
        resid_df = (self.n - self.s.size) + shrink.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            score = self.n * rss / resid_df**2
        score = np.where(resid_df >= min_residual_df(self.n), score, np.nan)
        return score, rss, self.n - resid_df

    def coefficients(self, lam: np.ndarray, z: np.ndarray) -> np.ndarray:
        d = 1.0 / (1.0 + lam[:, None] * self.s[None, :])
        return (d * z) @ self.coef_map.T


def _select_lambda(smoother: _SpectralSmoother, g: np.ndarray, bounds, n_grid: int):
    """Vectorized GCV minimization for rows of ``g`` sharing observed positions.

    Coarse scan on a log grid, then golden-section refinement in log10(lambda)
    within the bracket around the best grid point. Near-ties (relative to the
    mean square of the data) are resolved toward the larger, smoother lambda.
    """
    lo, hi = np.log10(bounds[0]), np.log10(bounds[1])
    log_grid = np.linspace(lo, hi, n_grid)
    z, base = smoother.project(g)
    scores, _, _ = smoother.gcv(10.0**log_grid, z, base)
    finite = np.isfinite(scores)
    bad = ~finite.any(axis=0)
    scores = np.where(finite, scores, np.inf)
    best = scores.min(axis=0)
    scale = np.mean(g * g, axis=1) + np.finfo(float).tiny
    near = scores <= best[None, :] + 1e-10 * scale[None, :]
    idx = n_grid - 1 - np.argmax(near[::-1], axis=0)

    a = log_grid[np.maximum(idx - 1, 0)]
    b = log_grid[np.minimum(idx + 1, n_grid - 1)]
    ratio = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - ratio * (b - a)
    d = a + ratio * (b - a)

    def f(x):
        s = smoother.gcv_pointwise(10.0**x, z, base)[0]
        return np.where(np.isfinite(s), s, np.inf)

    fc, fd = f(c), f(d)
    for _ in range(GOLDEN_ITERATIONS):
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        d_new = np.where(left, c, a + ratio * (b - a))
        c_new = np.where(left, b - ratio * (b - a), d)
        c, d = c_new, d_new
        fc, fd = f(c), f(d)
    x_ref = np.where(fc <= fd, c, d)
    f_ref = np.minimum(fc, fd)
    grid_x = log_grid[idx]
    f_grid = scores[idx, np.arange(idx.size)]
    # a tie toward a larger lambda on the grid wins over a marginal golden improvement
    use_ref = (f_ref < f_grid) & ~(near[-1] & (idx == n_grid - 1))
    log_lam = np.where(use_ref, x_ref, grid_x)
    lam = 10.0**log_lam
    gcv, rss, trace = smoother.gcv_pointwise(lam, z, base)
    coef = smoother.coefficients(lam, z)
    return lam, coef, gcv, rss, trace, bad


def gcv_select_lambda(
    values, positions, spec: BasisSpec, bounds=LAMBDA_BOUNDS, n_grid: int = N_LAMBDA_GRID
) -> tuple[float, SmoothCurve]:
    """Pick the smoothing parameter for one subject by minimizing GCV.

    ``GCV(lam) = n * RSS(lam) / (n - tr H(lam))**2`` with ``n`` the number of
    observed points. Scores with fewer than :func:`min_residual_df` residual
    degrees of freedom count as undefined. Raises :class:`GcvError` if no lambda gives a
    finite score (e.g. only two observed points, where every fit interpolates).
    """
    g, x, mask = _observed(values, positions)
    phi = bspline_basis_matrix(spec, x)
    smoother = _SpectralSmoother(phi, penalty_root(spec))
    lam, coef, gcv, rss, trace, bad = _select_lambda(smoother, g[None, :], bounds, n_grid)
    if bad[0]:
        raise GcvError("GCV is undefined for every smoothing parameter")
    curve = SmoothCurve(spec, coef[0], float(lam[0]), float(gcv[0]), mask, float(trace[0]), float(rss[0]))
    return curve.lam, curve


# ---------------------------------------------------------------------------
# batch smoothing
# ---------------------------------------------------------------------------


@dataclass
class SmoothingResult:
    """Coefficients and diagnostics for a batch of subjects."""

    basis: BasisSpec
    coefficients: np.ndarray
    lambdas: np.ndarray
    gcv: np.ndarray
    gcv_fallback: np.ndarray

    def curves(self) -> list[SmoothCurve]:
        return [
            SmoothCurve(self.basis, c, float(lam), float(s))
            for c, lam, s in zip(self.coefficients, self.lambdas, self.gcv)
        ]

    def to_grid(self, M: int) -> CurveGrid:
        grid = make_grid(M)
        return CurveGrid(grid, self.coefficients @ bspline_basis_matrix(self.basis, grid).T)


def smooth_codes(
    codes: np.ndarray,
    positions,
    spec: BasisSpec,
    bounds=LAMBDA_BOUNDS,
    n_grid: int = N_LAMBDA_GRID,
) -> SmoothingResult:
    """Smooth every row of ``codes`` (``nan`` = missing) with basis ``spec``.

    Rows are grouped by missingness pattern so each decomposition is shared.
    Penalized rows whose GCV is undefined fall back to the upper lambda bound
    (a straight-line fit) and are flagged in ``gcv_fallback``.
    """
    codes = np.asarray(codes, dtype=float)
    positions = np.asarray(positions, dtype=float)
    n_subj = codes.shape[0]
    k = spec.n_basis
    coef = np.zeros((n_subj, k))
    lambdas = np.zeros(n_subj)
    gcv = np.full(n_subj, np.nan)
    fallback = np.zeros(n_subj, dtype=bool)
    observed = ~np.isnan(codes)
    patterns, inverse = np.unique(observed, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    root = penalty_root(spec) if spec.penalized else None
    for p, pattern in enumerate(patterns):
        rows = np.flatnonzero(inverse == p)
        x = positions[pattern]
        if np.unique(x).size < 2:
            raise InsufficientData(f"subject {rows[0]} has fewer than two observed genotypes")
        g = codes[np.ix_(rows, pattern)]
        phi = bspline_basis_matrix(spec, x)
        if not spec.penalized:
            coef[rows] = g @ np.linalg.pinv(phi).T
            continue
        try:
            smoother = _SpectralSmoother(phi, root)
        except np.linalg.LinAlgError:
            for r in rows:
                lam, curve = _fallback_select(codes[r], positions, spec, bounds, n_grid)
                coef[r], lambdas[r], gcv[r] = curve.coefficients, lam, curve.gcv
            continue
        lam, c, score, _, _, bad = _select_lambda(smoother, g, bounds, n_grid)
        if bad.any():
            lam = np.where(bad, bounds[1], lam)
            z, _ = smoother.project(g)
            c = smoother.coefficients(lam, z)
            fallback[rows[bad]] = True
        coef[rows], lambdas[rows], gcv[rows] = c, lam, score
    return SmoothingResult(spec, coef, lambdas, gcv, fallback)


def _fallback_select(values, positions, spec, bounds, n_grid):
    """Dense direct-solve GCV scan for degenerate observation patterns."""
    best = None
    for lam in np.logspace(np.log10(bounds[0]), np.log10(bounds[1]), n_grid):
        curve = fit_penalized(values, positions, spec, lam)
        if np.isfinite(curve.gcv) and (best is None or curve.gcv <= best.gcv):
            best = curve
    if best is None:
        best = fit_penalized(values, positions, spec, bounds[1])
    return best.lam, best


def discretize_curves(curves: Sequence[SmoothCurve], M: int) -> CurveGrid:
    """Evaluate each curve on ``M`` equally spaced points of [0, 1]."""
    grid = make_grid(M)
    if not curves:
        return CurveGrid(grid, np.zeros((0, grid.size)))
    values = np.empty((len(curves), grid.size))
    cache = {}
    for i, curve in enumerate(curves):
        key = id(curve.basis)
        if key not in cache:
            cache[key] = bspline_basis_matrix(curve.basis, grid)
        values[i] = cache[key] @ curve.coefficients
    return CurveGrid(grid, values)


class GenotypeSmoother(TransformerMixin, BaseEstimator):
    """Turn genotype rows into smooth curves sampled on a common grid.

    Parameters
    ----------
    strategy : {"small", "everyother", "penalized"}
        Knot layout; only ``"penalized"`` uses a GCV-chosen roughness penalty.
    positions : array-like or None
        Normalized variant positions in [0, 1]. Equally spaced when None.
    n_grid : int or None
        Number of grid points; twice the number of variants when None.
    order : int
        B-spline order (4 = cubic).
    """

    def __init__(self, strategy="penalized", positions=None, n_grid=None, order=4):
        self.strategy = strategy
        self.positions = positions
        self.n_grid = n_grid
        self.order = order

    def fit(self, X, y=None):
        from .genotype import check_genotypes

        X = check_genotypes(X)
        t = X.shape[1]
        if self.positions is None:
            pos = np.linspace(0.0, 1.0, t)
        else:
            pos = np.asarray(self.positions, dtype=float)
            if pos.shape != (t,):
                raise BasisError("positions do not match the number of variants")
        self.positions_ = pos
        self.basis_ = make_knots(pos, self.strategy, order=self.order)
        self.grid_ = make_grid(self.n_grid if self.n_grid is not None else default_grid_size(t))
        self._grid_basis = bspline_basis_matrix(self.basis_, self.grid_)
        self.n_features_in_ = t
        return self

    def smooth(self, X) -> SmoothingResult:
        check_is_fitted(self, "basis_")
        from .genotype import check_genotypes

        X = check_genotypes(X)
        if X.shape[1] != self.n_features_in_:
            raise BasisError("number of variants differs from fit")
        return smooth_codes(X, self.positions_, self.basis_)

    def transform(self, X) -> np.ndarray:
        return self.smooth(X).coefficients @ self._grid_basis.T

    def transform_grid(self, X) -> CurveGrid:
        return CurveGrid(self.grid_, self.transform(X))
