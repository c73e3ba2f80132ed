"""Functional one-way ANOVA on smoothed genotype curves.

The statistic compares integrated between-group and within-group variation
of the curves. Its null distribution is approximated either by an F law with
fractional degrees of freedom ``(k-1) kappa`` and ``(n-k) kappa``, where
``kappa = tr(G)^2 / tr(G^2)`` for the pooled covariance ``G``, or by
permuting subjects through the matrix of squared L2 distances between curves.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special
from sklearn.base import BaseEstimator

from ._perm import add_one_pvalue, chunks, permuted_copies
from .exceptions import (
    DegenerateCovariance,
    DegenerateDenominator,
    GroupError,
    NumericError,
    ShapeError,
    ZeroWithinDf,
)
from .genotype import Phenotype
from .splines import CurveGrid, trapezoid_weights

DEFAULT_PERMUTATIONS = 999
_DEGENERATE = "degenerate_zero_variation"


@dataclass(frozen=True)
class GroupFunctionStats:
    """Group means, grand mean and pooled covariance on the grid."""

    group_means: np.ndarray
    grand_mean: np.ndarray
    pooled_cov: np.ndarray
    group_sizes: np.ndarray

    @property
    def k(self) -> int:
        return self.group_sizes.size

    @property
    def n(self) -> int:
        return int(self.group_sizes.sum())


@dataclass(frozen=True)
class SatterthwaiteApprox:
    """Scaled chi-square ``c * chi2(kappa)`` matching a weighted chi-square sum."""

    kappa: float
    c: float
    trace: float
    trace_sq: float


@dataclass
class FanovaResult:
    f_stat: float
    kappa: float
    df1: float
    df2: float
    p_asymptotic: float
    p_permutation: float | None = None
    permutations_used: int = 0
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["f"] = out.pop("f_stat")
        out["I"] = out.pop("permutations_used")
        if out["p_permutation"] is None:
            del out["p_permutation"]
        return out


def _as_phenotype(ph) -> Phenotype:
    return ph if isinstance(ph, Phenotype) else Phenotype(np.asarray(ph))


def _check_groups(values: np.ndarray, ph: Phenotype) -> None:
    if values.shape[0] != ph.n:
        raise ShapeError(f"{values.shape[0]} curves but {ph.n} group labels")
    if ph.k < 2:
        raise GroupError("at least two groups are required")
    if ph.n - ph.k < 1:
        raise ZeroWithinDf("n - k must be at least 1")


def _group_means(values: np.ndarray, ph: Phenotype) -> np.ndarray:
    sums = np.zeros((ph.k, values.shape[1]))
    np.add.at(sums, ph.labels, values)
    return sums / ph.group_sizes[:, None]


def group_function_stats(grid: CurveGrid, ph) -> GroupFunctionStats:
    """Mean function per group, grand mean, and pooled M x M covariance."""
    ph = _as_phenotype(ph)
    values = np.asarray(grid.values if isinstance(grid, CurveGrid) else grid, dtype=float)
    _check_groups(values, ph)
    means = _group_means(values, ph)
    sizes = ph.group_sizes
    grand = sizes @ means / ph.n
    resid = values - means[ph.labels]
    cov = resid.T @ resid / (ph.n - ph.k)
    return GroupFunctionStats(means, grand, (cov + cov.T) / 2.0, sizes)


def _grid_weights(grid, m: int) -> np.ndarray:
    if isinstance(grid, CurveGrid):
        return grid.weights
    return trapezoid_weights(np.linspace(0.0, 1.0, m))


def fanova_components(stats: GroupFunctionStats, grid, ph) -> tuple[float, float, float]:
    """Numerator and the two forms of the denominator of the F ratio.

    Returns ``(between / (k-1), raw residual form, integrated covariance
    diagonal)``; the last two are algebraically identical.
    """
    ph = _as_phenotype(ph)
    values = np.asarray(grid.values if isinstance(grid, CurveGrid) else grid, dtype=float)
    w = _grid_weights(grid, values.shape[1])
    between = stats.group_sizes @ ((stats.group_means - stats.grand_mean) ** 2 @ w)
    resid = values - stats.group_means[ph.labels]
    raw = float(np.sum(resid**2 @ w)) / (ph.n - ph.k)
    diag = float(np.diag(stats.pooled_cov) @ w)
    return float(between) / (ph.k - 1), raw, diag


def _ratio(num: float, den: float, scale: float) -> tuple[float, list]:
    tiny = 1e-13 * scale + np.finfo(float).tiny
    if den <= tiny:
        if num <= tiny:
            return 0.0, [_DEGENERATE]
        raise DegenerateDenominator("no within-group variation but nonzero between-group variation")
    return num / den, []


def fanova_f_statistic(stats: GroupFunctionStats, grid, ph) -> float:
    """F ratio of between- to within-group integrated variation.

    Curves with no variation at all give ``0.0`` (see :func:`fanova_test`
    for the accompanying flag).
    """
    num, _, den = fanova_components(stats, grid, ph)
    values = grid.values if isinstance(grid, CurveGrid) else grid
    return _ratio(num, den, float(np.mean(np.square(values))))[0]


def satterthwaite_kappa(pooled_cov) -> SatterthwaiteApprox:
    """Degrees-of-freedom adjustment ``kappa = tr(G)^2 / tr(G^2)``.

    The eigenvalues enter only through ``sum(l) = tr(G)`` and
    ``sum(l^2) = tr(G^2)``, so no eigendecomposition is needed.
    """
    g = np.asarray(pooled_cov, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeError("covariance must be square")
    trace = float(np.trace(g))
    trace_sq = float(np.sum(g * g.T))
    if not trace > 0 or not trace_sq > 0:
        raise DegenerateCovariance("covariance has non-positive trace")
    return SatterthwaiteApprox(trace**2 / trace_sq, trace_sq / trace, trace, trace_sq)


def _satterthwaite_from_residuals(resid: np.ndarray, df: int) -> SatterthwaiteApprox:
    # tr(R'R)^2 via the smaller of the two Gram matrices
    gram = resid @ resid.T if resid.shape[0] < resid.shape[1] else resid.T @ resid
    trace = float(np.trace(gram)) / df
    trace_sq = float(np.sum(gram * gram)) / df**2
    if not trace > 0 or not trace_sq > 0:
        raise DegenerateCovariance("covariance has non-positive trace")
    return SatterthwaiteApprox(trace**2 / trace_sq, trace_sq / trace, trace, trace_sq)


def f_sf(f: float, df1: float, df2: float) -> float:
    """Upper tail of the F distribution, fractional degrees of freedom allowed.

    ``P(F > f) = I_x(df2/2, df1/2)`` with ``x = df2 / (df2 + df1 f)``.
    """
    if f <= 0:
        return 1.0
    if np.isinf(f):
        return 0.0
    x = df2 / (df2 + df1 * f)
    return float(special.betainc(df2 / 2.0, df1 / 2.0, x))


def fanova_asymptotic_pvalue(f: float, k: int, n: int, kappa: float) -> float:
    if not (np.isfinite(f) and np.isfinite(kappa)):
        raise NumericError("F statistic and kappa must be finite")
    if f < 0 or kappa <= 0 or n <= k:
        raise NumericError("need f >= 0, kappa > 0 and n > k")
    return f_sf(f, (k - 1) * kappa, (n - k) * kappa)


def squared_distance_matrix(grid) -> np.ndarray:
    """``D2[i, j] = int (y_i - y_j)^2 dt`` by the trapezoid rule."""
    values = np.asarray(grid.values if isinstance(grid, CurveGrid) else grid, dtype=float)
    w = _grid_weights(grid, values.shape[1])
    sq = (values**2) @ w
    d2 = sq[:, None] + sq[None, :] - 2.0 * (values * w) @ values.T
    np.fill_diagonal(d2, 0.0)
    d2 = np.maximum((d2 + d2.T) / 2.0, 0.0)
    return d2


def _within_ss(d2: np.ndarray, labels: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Within-group sum of squares for each row of ``labels`` (I x n)."""
    labels = np.atleast_2d(labels)
    out = np.zeros(labels.shape[0])
    for g, n_g in enumerate(sizes):
        ind = (labels == g).astype(float)
        out += np.einsum("pi,pi->p", ind @ d2, ind) / (2.0 * n_g)
    return out


def _f_from_ss(total: float, within: np.ndarray, k: int, n: int):
    between = np.maximum(total - within, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (between / (k - 1)) / (within / (n - k))


def f_from_distances(d2, ph) -> float:
    """Pseudo-F from squared distances (Gower's identity).

    ``SS_total = sum_{i<j} D2 / n`` and ``SS_within = sum_g sum_{i<j in g} D2 / n_g``.
    """
    ph = _as_phenotype(ph)
    d2 = np.asarray(d2, dtype=float)
    if d2.shape != (ph.n, ph.n):
        raise ShapeError("distance matrix does not match the number of subjects")
    _check_groups(d2, ph)
    total = d2.sum() / (2.0 * ph.n)
    within = float(_within_ss(d2, ph.labels, ph.group_sizes)[0])
    between = total - within
    scale = total / max(ph.n, 1)
    tiny = 1e-13 * scale + np.finfo(float).tiny
    if within <= tiny:
        if between <= tiny:
            return 0.0
        raise DegenerateDenominator("no within-group variation but nonzero between-group variation")
    return (between / (ph.k - 1)) / (within / (ph.n - ph.k))


def permutation_f_values(d2, ph, n_permutations: int = DEFAULT_PERMUTATIONS, seed=None) -> np.ndarray:
    """F statistics after jointly shuffling rows and columns of ``d2``.

    Shuffling the matrix is the same as shuffling the group labels, which is
    what is done here.
    """
    ph = _as_phenotype(ph)
    d2 = np.asarray(d2, dtype=float)
    total = d2.sum() / (2.0 * ph.n)
    perms = permuted_copies(ph.labels, n_permutations, seed)
    out = np.empty(n_permutations)
    for sl in chunks(n_permutations, 256):
        out[sl] = _f_from_ss(total, _within_ss(d2, perms[sl], ph.group_sizes), ph.k, ph.n)
    return out


def permutation_pvalue(d2, ph, n_permutations: int = DEFAULT_PERMUTATIONS, seed=None) -> float:
    """Add-one permutation p-value ``(#{F_perm >= F_obs} + 1) / (I + 1)``."""
    f_obs = f_from_distances(d2, ph)
    f_perm = permutation_f_values(d2, ph, n_permutations, seed)
    # relative slack so that ties with the observed value count as extreme
    n_extreme = np.sum(f_perm >= f_obs * (1.0 - 1e-12))
    return add_one_pvalue(n_extreme, n_permutations)


def fanova_test(grid, ph, n_permutations: int = 0, seed=None) -> FanovaResult:
    """Full FANOVA: statistic, kappa, asymptotic and (optionally) permutation p.

    With no functional variation at all the result is ``F = 0``, ``p = 1``
    and the ``degenerate_zero_variation`` flag.
    """
    ph = _as_phenotype(ph)
    values = np.asarray(grid.values if isinstance(grid, CurveGrid) else grid, dtype=float)
    _check_groups(values, ph)
    w = _grid_weights(grid, values.shape[1])
    means = _group_means(values, ph)
    grand = ph.group_sizes @ means / ph.n
    resid = values - means[ph.labels]
    num = float(ph.group_sizes @ ((means - grand) ** 2 @ w)) / (ph.k - 1)
    den = float(np.sum(resid**2 @ w)) / (ph.n - ph.k)
    f, flags = _ratio(num, den, float(np.mean(values**2)))
    if flags:
        return FanovaResult(0.0, float("nan"), float("nan"), float("nan"), 1.0,
                            1.0 if n_permutations else None, int(n_permutations), flags)
    approx = _satterthwaite_from_residuals(resid, ph.n - ph.k)
    kappa = approx.kappa
    p_asym = fanova_asymptotic_pvalue(f, ph.k, ph.n, kappa)
    result = FanovaResult(f, kappa, (ph.k - 1) * kappa, (ph.n - ph.k) * kappa, p_asym)
    if n_permutations:
        d2 = squared_distance_matrix(grid)
        result.p_permutation = permutation_pvalue(d2, ph, n_permutations, seed)
        result.permutations_used = int(n_permutations)
    return result


class FanovaTest(BaseEstimator):
    """Estimator wrapper: ``fit(curves, groups)`` runs the test.

    ``X`` holds curves sampled on an equally spaced grid over [0, 1] (for
    example the output of :class:`~funcassoc.splines.GenotypeSmoother`).

    Attributes
    ----------
    result_ : FanovaResult
    f_statistic_, kappa_, pvalue_ : float
        ``pvalue_`` is the permutation p-value when ``n_permutations > 0``,
        otherwise the asymptotic one.
    """

    def __init__(self, n_permutations=0, random_state=None):
        self.n_permutations = n_permutations
        self.random_state = random_state

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ShapeError("expected a 2-D array of sampled curves")
        self.result_ = fanova_test(X, Phenotype.from_labels(np.asarray(y).tolist()),
                                   self.n_permutations, self.random_state)
        self.f_statistic_ = self.result_.f_stat
        self.kappa_ = self.result_.kappa
        self.pvalue_ = (self.result_.p_permutation if self.n_permutations
                        else self.result_.p_asymptotic)
        self.n_features_in_ = X.shape[1]
        return self
