"""Simplified SKAT built from per-variant Cochran-Armitage trend statistics.

With weights equal to the inverse null variance of each trend score, the
SKAT statistic reduces to a plain sum of the per-variant trend chi-squares.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator

from ._perm import add_one_pvalue, chunks, permuted_copies
from .exceptions import ShapeError
from .genotype import GenotypeMatrix, check_genotypes

DEFAULT_PERMUTATIONS = 999


@dataclass
class SkatLiteResult:
    q: float
    per_variant_chi2: np.ndarray
    p_permutation: float | None = None
    p_satterthwaite: float | None = None
    permutations_used: int = 0
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("per_variant_chi2")
        out["I"] = out.pop("permutations_used")
        if out["p_satterthwaite"] is None:
            del out["p_satterthwaite"]
        return out


def _centered_genotypes(g) -> np.ndarray:
    codes = check_genotypes(g.codes if isinstance(g, GenotypeMatrix) else g)
    # missing calls take the variant mean, i.e. contribute nothing once centered
    means = np.nanmean(np.where(np.isnan(codes).all(axis=0), 0.0, codes), axis=0)
    filled = np.where(np.isnan(codes), means, codes)
    return filled - filled.mean(axis=0)


def _check_binary(y, n) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (n,):
        raise ShapeError("response length does not match the number of subjects")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ShapeError("responses must be coded 0/1")
    return y


class _TrendScorer:
    def __init__(self, g):
        self.gc = _centered_genotypes(g)
        self.ss = np.einsum("ij,ij->j", self.gc, self.gc)

    def chi2(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-variant trend chi-squares for rows of ``y``; and the zero-variance mask."""
        y = np.atleast_2d(y)
        ybar = y.mean(axis=1, keepdims=True)
        u = (y - ybar) @ self.gc
        v0 = (ybar * (1.0 - ybar)) * self.ss[None, :]
        zero = v0 <= 0
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(zero, 0.0, u**2 / v0), zero


def trend_statistics(g, y) -> np.ndarray:
    """Cochran-Armitage trend chi-square for every variant.

    ``U_j = sum_i g_ij (y_i - ybar)``, ``V_j = ybar (1 - ybar) sum_i (g_ij - gbar_j)^2``
    and the statistic is ``U_j^2 / V_j``; variants with ``V_j = 0`` give 0.
    """
    scorer = _TrendScorer(g)
    y = _check_binary(y, scorer.gc.shape[0])
    return scorer.chi2(y)[0][0]


def skat_q(per_variant) -> float:
    return float(np.sum(per_variant))


def skat_permutation_statistics(g, y, n_permutations=DEFAULT_PERMUTATIONS, seed=None) -> np.ndarray:
    scorer = _TrendScorer(g)
    y = _check_binary(y, scorer.gc.shape[0])
    perms = permuted_copies(y, n_permutations, seed)
    out = np.empty(n_permutations)
    for sl in chunks(n_permutations, 512):
        out[sl] = scorer.chi2(perms[sl])[0].sum(axis=1)
    return out


def skat_permutation_pvalue(g, y, n_permutations=DEFAULT_PERMUTATIONS, seed=None) -> float:
    """``(#{Q_perm >= Q_obs} + 1) / (I + 1)``."""
    q_obs = skat_q(trend_statistics(g, y))
    q_perm = skat_permutation_statistics(g, y, n_permutations, seed)
    return add_one_pvalue(np.sum(q_perm >= q_obs * (1.0 - 1e-12)), n_permutations)


def skat_satterthwaite_pvalue(g, y) -> float:
    """Approximate p-value from a scaled chi-square moment match.

    Under the null the score vector is roughly normal with covariance
    proportional to the genotype cross-product, so ``Q`` behaves like a
    weighted chi-square sum whose weights are the eigenvalues of the genotype
    correlation matrix. Only its first two moments are matched.
    """
    gc = _centered_genotypes(g)
    keep = np.einsum("ij,ij->j", gc, gc) > 0
    if not keep.any():
        return 1.0
    gc = gc[:, keep]
    n = gc.shape[0]
    q = skat_q(trend_statistics(g, y))
    norms = np.sqrt(np.einsum("ij,ij->j", gc, gc))
    z = gc / norms
    corr_gram = z @ z.T if z.shape[0] < z.shape[1] else z.T @ z
    scale = n / (n - 1.0)  # permutation variance of the centered score
    trace = scale * float(np.trace(corr_gram))
    trace_sq = scale**2 * float(np.sum(corr_gram * corr_gram))
    c = trace_sq / trace
    kappa = trace**2 / trace_sq
    return float(stats.chi2.sf(q / c, kappa))


def skatlite_test(g, y, n_permutations=DEFAULT_PERMUTATIONS, seed=None, satterthwaite=False) -> SkatLiteResult:
    chi2 = trend_statistics(g, y)
    flags = []
    gc_ss = _TrendScorer(g).ss
    if np.any(gc_ss <= 0):
        flags.append("zero_variance_variant")
    result = SkatLiteResult(skat_q(chi2), chi2, flags=flags)
    if n_permutations:
        q_perm = skat_permutation_statistics(g, y, n_permutations, seed)
        result.p_permutation = add_one_pvalue(np.sum(q_perm >= result.q * (1.0 - 1e-12)), n_permutations)
        result.permutations_used = int(n_permutations)
    if satterthwaite:
        result.p_satterthwaite = skat_satterthwaite_pvalue(g, y)
    return result


class SkatLiteTest(BaseEstimator):
    """Estimator wrapper; ``X`` is the raw genotype matrix (not curves)."""

    def __init__(self, n_permutations=DEFAULT_PERMUTATIONS, random_state=None, satterthwaite=False):
        self.n_permutations = n_permutations
        self.random_state = random_state
        self.satterthwaite = satterthwaite

    def fit(self, X, y):
        X = check_genotypes(X)
        self.result_ = skatlite_test(X, y, self.n_permutations, self.random_state, self.satterthwaite)
        self.statistic_ = self.result_.q
        self.pvalue_ = (self.result_.p_permutation if self.n_permutations
                        else self.result_.p_satterthwaite)
        self.n_features_in_ = X.shape[1]
        return self
