"""Synthetic haplotype panels, case-control phenotypes, and size/power runs.

The panel is a desk-scale stand-in for a real reference panel: a handful of
founder haplotypes are copied with recombination switches, common variants
are spread across founders at random (so neighbouring variants show both
positive and negative LD), and rare variants sit on a single founder
background. Subjects are mosaics of two panel haplotypes.

Every random draw flows from ``SimConfig.seed``: the panel uses one derived
stream and replicate ``r`` uses the stream ``(seed, 1, r)``, so results do not
depend on how replicates are spread across workers.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit

from .exceptions import FuncAssocError, SamplingTimeout
from .fanova import fanova_test
from .flm import flm_test
from .genotype import GenotypeMatrix, Phenotype, filter_constant_variants, relabel_minimize_flips
from .skatlite import skatlite_test
from .splines import CurveGrid, default_grid_size, make_knots, smooth_codes

log = logging.getLogger(__name__)

METHODS = ("fanova", "flm", "skatlite")
MAX_SUBJECT_DRAWS = 1_000_000


class SimulationError(FuncAssocError, RuntimeError):
    """A replicate failed; ``replicate`` holds its index."""

    def __init__(self, replicate: int, cause: Exception):
        super().__init__(f"replicate {replicate}: {type(cause).__name__}: {cause}")
        self.replicate = replicate


@dataclass(frozen=True)
class HaplotypePanel:
    haplotypes: np.ndarray  # H x T, entries 0/1
    positions: np.ndarray  # raw coordinates (bp)

    @property
    def n_haplotypes(self) -> int:
        return self.haplotypes.shape[0]

    @property
    def n_variants(self) -> int:
        return self.haplotypes.shape[1]

    @property
    def maf_spectrum(self) -> np.ndarray:
        """Frequency of the coded (1) allele at each variant."""
        return self.haplotypes.mean(axis=0)


def _mosaic_sources(rng, n_rows: int, n_sources: int, switch_prob: np.ndarray) -> np.ndarray:
    """Source index per (row, variant) for copying with random switches."""
    t = switch_prob.size + 1
    switches = rng.random((n_rows, t - 1)) < switch_prob[None, :]
    segment = np.concatenate([np.zeros((n_rows, 1), dtype=int), np.cumsum(switches, axis=1)], axis=1)
    picks = rng.integers(n_sources, size=(n_rows, t))
    return np.take_along_axis(picks, segment, axis=1)


def _switch_prob(positions: np.ndarray, rate: float) -> np.ndarray:
    span = positions[-1] - positions[0] if positions.size > 1 else 1.0
    gaps = np.diff(positions) / (span if span > 0 else 1.0)
    return 1.0 - np.exp(-rate * gaps)


def generate_panel(
    t_variants: int = 350,
    h_haplotypes: int = 1000,
    seed=None,
    *,
    n_founders: int = 12,
    rare_fraction: float = 0.7,
    region_length: int = 30_000,
    recombination: float = 4.0,
    copy_prob: float = 1.0,
) -> HaplotypePanel:
    """Build an LD-structured haplotype panel.

    Parameters
    ----------
    t_variants, h_haplotypes : int
        Panel dimensions.
    n_founders : int
        Founder haplotypes the panel is copied from (capped at ``h_haplotypes``).
    rare_fraction : float
        Share of variants with frequency drawn log-uniformly in [5e-4, 5e-2];
        the rest get founder carrier sets with frequency around U(0.05, 0.5).
    recombination : float
        Expected number of copying switches across the whole region.
    copy_prob : float
        Probability an allele is copied faithfully (otherwise it is flipped).
    """
    if t_variants < 2 or h_haplotypes < 2:
        raise ValueError("need at least 2 variants and 2 haplotypes")
    rng = np.random.default_rng(seed)
    positions = np.sort(rng.choice(np.arange(1, region_length + 1), size=t_variants, replace=False)).astype(float)
    f = max(2, min(n_founders, h_haplotypes))
    rare = rng.random(t_variants) < rare_fraction

    founders = np.zeros((f, t_variants), dtype=np.uint8)
    for j in np.flatnonzero(~rare):
        p = rng.uniform(0.05, 0.5)
        carriers = rng.random(f) < p
        if not carriers.any():
            carriers[rng.integers(f)] = True
        if carriers.all():
            carriers[rng.integers(f)] = False
        founders[carriers, j] = 1

    source = _mosaic_sources(rng, h_haplotypes, f, _switch_prob(positions, recombination))
    haps = founders[source, np.arange(t_variants)[None, :]].astype(np.uint8)

    rare_idx = np.flatnonzero(rare)
    if rare_idx.size:
        freq = 10.0 ** rng.uniform(np.log10(5e-4), np.log10(5e-2), size=rare_idx.size)
        background = rng.integers(f, size=rare_idx.size)
        on_bg = source[:, rare_idx] == background[None, :]
        hit = rng.random((h_haplotypes, rare_idx.size)) < np.minimum(freq * f, 1.0)[None, :]
        haps[:, rare_idx] = (on_bg & hit).astype(np.uint8)

    if copy_prob < 1.0:
        noise = rng.random(haps.shape) > copy_prob
        haps = np.where(noise, 1 - haps, haps).astype(np.uint8)

    # every variant must be polymorphic in the panel
    counts = haps.sum(axis=0)
    for j in np.flatnonzero(counts == 0):
        haps[rng.integers(h_haplotypes), j] = 1
    for j in np.flatnonzero(counts == h_haplotypes):
        haps[rng.integers(h_haplotypes), j] = 0
    return HaplotypePanel(haps, positions)


def _draw_genotypes(panel: HaplotypePanel, n: int, rng, recombination: float = 1.0) -> np.ndarray:
    """``n`` x T genotype codes, each the sum of two mosaic haplotypes."""
    t = panel.n_variants
    src = _mosaic_sources(rng, 2 * n, panel.n_haplotypes, _switch_prob(panel.positions, recombination))
    alleles = panel.haplotypes[src, np.arange(t)[None, :]]
    return (alleles[:n].astype(np.int16) + alleles[n:]).astype(float)


def _apply_missing(codes: np.ndarray, rate: float, rng) -> np.ndarray:
    if rate <= 0:
        return codes
    out = codes.copy()
    out[rng.random(codes.shape) < rate] = np.nan
    return out


def sample_genotypes(panel: HaplotypePanel, n: int, seed=None, missing_rate: float = 0.0) -> GenotypeMatrix:
    """Draw ``n`` subjects from the panel and drop constant variants."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    codes = _apply_missing(_draw_genotypes(panel, n, rng), missing_rate, rng)
    g = GenotypeMatrix(codes, _normalized(panel.positions), raw_positions=panel.positions)
    return filter_constant_variants(g)


def _normalized(raw: np.ndarray) -> np.ndarray:
    if raw.size < 2:
        return np.zeros(raw.size)
    out = (raw - raw[0]) / (raw[-1] - raw[0])
    out[0], out[-1] = 0.0, 1.0
    return out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    """Everything needed to reproduce a size or power experiment."""

    n_cases: int = 25
    n_controls: int = 25
    mu_beta: float = 0.0
    sigma_beta: float = 0.25
    causal_fraction: float = 0.05
    replicates: int = 100
    alpha_levels: tuple = (0.05,)
    smoothing_strategy: str = "penalized"
    relabel: bool = True
    methods: tuple = METHODS
    seed: int = 0
    missing_rate: float = 0.0
    fanova_pvalue: str = "asymptotic"
    flm_pvalue: str = "permutation"
    n_permutations: int = 999
    panel_variants: int = 350
    panel_haplotypes: int = 1000
    panel_founders: int = 12
    panel_rare_fraction: float = 0.7
    region_length: int = 30_000
    n_jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "alpha_levels", tuple(float(a) for a in _as_list(self.alpha_levels)))
        object.__setattr__(self, "methods", tuple(str(m) for m in _as_list(self.methods)))
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if self.n_cases < 1 or self.n_controls < 1:
            raise ValueError("need at least one case and one control")
        if not 0.0 <= self.causal_fraction <= 1.0:
            raise ValueError("causal_fraction must lie in [0, 1]")
        if self.sigma_beta < 0 or not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("sigma_beta must be >= 0 and missing_rate in [0, 1)")
        if self.fanova_pvalue not in ("asymptotic", "permutation"):
            raise ValueError("fanova_pvalue must be 'asymptotic' or 'permutation'")
        if self.flm_pvalue not in ("permutation", "chisq"):
            raise ValueError("flm_pvalue must be 'permutation' or 'chisq'")
        for name in ("mu_beta", "sigma_beta", "causal_fraction", "missing_rate"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def n_subjects(self) -> int:
        return self.n_cases + self.n_controls

    @property
    def is_null(self) -> bool:
        return self.causal_fraction == 0 or (self.mu_beta == 0 and self.sigma_beta == 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_levels"] = list(self.alpha_levels)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        base = dict(PRESETS[preset]) if preset else {}
        base.update(d)
        known = {f.name: f for f in fields(cls)}
        unknown = set(base) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**{k: _coerce(known[k], v) for k, v in base.items()})


def _as_list(v) -> list:
    if isinstance(v, str):
        return [s.strip() for s in v.split(",") if s.strip()]
    if isinstance(v, (int, float)):
        return [v]
    return list(v)


def _coerce(f, v):
    default = f.default
    if isinstance(default, bool):
        if isinstance(v, str):
            return v.strip().lower() in ("1", "true", "yes", "on")
        return bool(v)
    if isinstance(default, int) and not isinstance(v, bool):
        return int(v)
    if isinstance(default, float):
        return float(v)
    return v


# Disease-model presets mirroring the published size and power settings.
PRESETS: dict[str, dict] = {
    "table1_null": dict(n_cases=250, n_controls=250, causal_fraction=0.0, replicates=1000),
    "table2_null": dict(n_cases=25, n_controls=25, causal_fraction=0.0, replicates=10_000,
                        alpha_levels=(0.001,), methods=("fanova",)),
    "n50_model1_small": dict(n_cases=25, n_controls=25, mu_beta=0.0, sigma_beta=0.25),
    "n50_model1_large": dict(n_cases=25, n_controls=25, mu_beta=0.0, sigma_beta=1.0),
    "n50_model2_small": dict(n_cases=25, n_controls=25, mu_beta=0.05, sigma_beta=0.25),
    "n50_model2_large": dict(n_cases=25, n_controls=25, mu_beta=0.05, sigma_beta=1.0),
    "n500_model1_small": dict(n_cases=250, n_controls=250, mu_beta=0.0, sigma_beta=0.05),
    "n500_model1_large": dict(n_cases=250, n_controls=250, mu_beta=0.0, sigma_beta=0.15),
    "n500_model2_small": dict(n_cases=250, n_controls=250, mu_beta=0.01, sigma_beta=0.05),
    "n500_model2_large": dict(n_cases=250, n_controls=250, mu_beta=0.01, sigma_beta=0.15),
    "n1000_model1_small": dict(n_cases=500, n_controls=500, mu_beta=0.0, sigma_beta=0.05),
    "n1000_model1_large": dict(n_cases=500, n_controls=500, mu_beta=0.0, sigma_beta=0.1),
    "n1000_model2_small": dict(n_cases=500, n_controls=500, mu_beta=0.001, sigma_beta=0.05),
    "n1000_model2_large": dict(n_cases=500, n_controls=500, mu_beta=0.001, sigma_beta=0.1),
}


def load_config(path) -> SimConfig:
    """Read a JSON object or ``key = value`` lines (``#`` starts a comment)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text)


def parse_config(text: str) -> SimConfig:
    stripped = text.strip()
    if stripped.startswith("{"):
        return SimConfig.from_dict(json.loads(stripped))
    d = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            d[key] = json.loads(value)
        except json.JSONDecodeError:
            d[key] = value
    return SimConfig.from_dict(d)


def panel_for(cfg: SimConfig) -> HaplotypePanel:
    return generate_panel(
        cfg.panel_variants,
        cfg.panel_haplotypes,
        seed=[cfg.seed, 0],
        n_founders=cfg.panel_founders,
        rare_fraction=cfg.panel_rare_fraction,
        region_length=cfg.region_length,
    )


def replicate_rng(cfg: SimConfig, replicate: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 1, replicate])


# ---------------------------------------------------------------------------
# phenotypes
# ---------------------------------------------------------------------------


@dataclass
class CaseControlSample:
    genotypes: GenotypeMatrix
    phenotype: Phenotype
    causal: np.ndarray
    betas: np.ndarray
    draws: int


def case_probability(codes: np.ndarray, causal: np.ndarray, betas: np.ndarray) -> np.ndarray:
    """``logit P(case) = sum_j G_ij beta_j`` over the causal variants (no intercept)."""
    if causal.size == 0:
        return np.full(codes.shape[0], 0.5)
    return expit(codes[:, causal] @ betas)


def simulate_phenotype_case_control(panel: HaplotypePanel, cfg: SimConfig, rng=None) -> CaseControlSample:
    """Draw a case-control sample by retrospective quota sampling.

    Causal variants (``ceil(causal_fraction * T)`` of the panel's ``T``) and
    their effects ``beta_j ~ N(mu_beta, sigma_beta^2)`` are drawn once per call.
    Subjects are generated in batches, given a disease status from the logistic
    model, and kept until both quotas are filled.
    """
    rng = np.random.default_rng(rng)
    t = panel.n_variants
    n_causal = math.ceil(cfg.causal_fraction * t)
    causal = np.sort(rng.choice(t, size=n_causal, replace=False)) if n_causal else np.zeros(0, int)
    betas = rng.normal(cfg.mu_beta, cfg.sigma_beta, size=n_causal)

    cases, controls = [], []
    n_case = n_ctrl = 0
    draws = 0
    batch = max(2 * cfg.n_subjects, 64)
    while n_case < cfg.n_cases or n_ctrl < cfg.n_controls:
        if draws >= MAX_SUBJECT_DRAWS:
            raise SamplingTimeout(f"quotas unfilled after {draws} subject draws")
        codes = _draw_genotypes(panel, batch, rng)
        status = rng.random(batch) < case_probability(codes, causal, betas)
        draws += batch
        take = codes[status][: cfg.n_cases - n_case]
        cases.append(take)
        n_case += take.shape[0]
        take = codes[~status][: cfg.n_controls - n_ctrl]
        controls.append(take)
        n_ctrl += take.shape[0]

    codes = np.vstack(controls + cases)
    labels = np.r_[np.zeros(cfg.n_controls, int), np.ones(cfg.n_cases, int)]
    codes = _apply_missing(codes, cfg.missing_rate, rng)
    g = GenotypeMatrix(codes, _normalized(panel.positions), raw_positions=panel.positions)
    g = filter_constant_variants(g)
    return CaseControlSample(g, Phenotype(labels, ("control", "case")), causal, betas, draws)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def curves_for(g: GenotypeMatrix, strategy: str = "penalized", relabel: bool = True,
               grid_size: int | None = None) -> CurveGrid:
    """Optionally relabel, smooth every subject, and discretize on the grid."""
    if relabel:
        g = relabel_minimize_flips(g)[0]
    smooth = smooth_codes(g.codes, g.positions, make_knots(g.positions, strategy))
    return smooth.to_grid(grid_size or default_grid_size(g.n_variants))


def analyze_sample(
    g: GenotypeMatrix,
    ph: Phenotype,
    methods: Sequence[str] = METHODS,
    strategy: str = "penalized",
    relabel: bool = True,
    fanova_pvalue: str = "asymptotic",
    flm_pvalue: str = "permutation",
    n_permutations: int = 999,
    seed=None,
) -> dict:
    """Run the requested tests on one data set; returns method -> p-value.

    FANOVA and FLM share the same (optionally relabeled) smoothed curves; the
    trend-based SKAT comparator uses the raw genotypes, which relabeling does
    not affect.
    """
    seeds = np.random.SeedSequence(seed).spawn(3)
    out = {}
    if "fanova" in methods or "flm" in methods:
        grid = curves_for(g, strategy, relabel)
        if "fanova" in methods:
            perms = n_permutations if fanova_pvalue == "permutation" else 0
            res = fanova_test(grid, ph, perms, seeds[0])
            out["fanova"] = res.p_permutation if perms else res.p_asymptotic
        if "flm" in methods:
            perms = n_permutations if flm_pvalue == "permutation" else 0
            res = flm_test(grid, ph.labels, n_permutations=perms, seed=seeds[1])
            out["flm"] = res.p_permutation if perms else res.p_chisq
    if "skatlite" in methods:
        out["skatlite"] = skatlite_test(g, ph.labels, n_permutations, seeds[2]).p_permutation
    return out


def run_replicate(cfg: SimConfig, panel: HaplotypePanel, replicate: int) -> dict:
    rng = replicate_rng(cfg, replicate)
    try:
        sample = simulate_phenotype_case_control(panel, cfg, rng)
        return analyze_sample(
            sample.genotypes,
            sample.phenotype,
            cfg.methods,
            cfg.smoothing_strategy,
            cfg.relabel,
            cfg.fanova_pvalue,
            cfg.flm_pvalue,
            cfg.n_permutations,
            seed=rng.integers(2**63),
        )
    except Exception as exc:  # noqa: BLE001 - re-raised with the replicate index
        raise SimulationError(replicate, exc) from exc


@dataclass
class PowerReport:
    """Rejection rates per method and significance level."""

    config: dict
    pvalues: dict = field(default_factory=dict)

    @property
    def replicates(self) -> int:
        return len(next(iter(self.pvalues.values()))) if self.pvalues else 0

    def rate(self, method: str, alpha: float) -> float:
        return float(np.mean(np.asarray(self.pvalues[method]) <= alpha))

    def se(self, method: str, alpha: float) -> float:
        r = self.rate(method, alpha)
        return math.sqrt(r * (1.0 - r) / self.replicates)

    def rows(self) -> list[dict]:
        return [
            dict(method=m, alpha=a, rate=self.rate(m, a), se=self.se(m, a), replicates=self.replicates)
            for m in self.pvalues
            for a in self.config["alpha_levels"]
        ]

    def to_tsv(self) -> str:
        lines = ["method\talpha\trate\tse\treplicates"]
        for r in self.rows():
            lines.append(f"{r['method']}\t{r['alpha']:g}\t{r['rate']:.6f}\t{r['se']:.6f}\t{r['replicates']}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "results": self.rows()}, indent=2)


def _run_chunk(cfg, panel, indices):
    return [run_replicate(cfg, panel, r) for r in indices]


def run_experiment(cfg: SimConfig, n_jobs: int | None = None, panel: HaplotypePanel | None = None) -> PowerReport:
    """Simulate ``cfg.replicates`` data sets and tabulate rejection rates.

    Results are identical for any ``n_jobs`` because each replicate owns its
    random stream and outputs are gathered in replicate order.
    """
    panel = panel if panel is not None else panel_for(cfg)
    n_jobs = cfg.n_jobs if n_jobs is None else n_jobs
    indices = np.arange(cfg.replicates)
    if n_jobs == 1:
        results = _run_chunk(cfg, panel, indices)
    else:
        n_chunks = max(1, min(cfg.replicates, 4 * (n_jobs if n_jobs > 0 else 8)))
        parts = Parallel(n_jobs=n_jobs if n_jobs > 0 else -1)(
            delayed(_run_chunk)(cfg, panel, idx) for idx in np.array_split(indices, n_chunks)
        )
        results = [r for part in parts for r in part]
    pvalues = {m: np.array([r[m] for r in results]) for m in cfg.methods}
    log.info("finished %d replicates", cfg.replicates)
    return PowerReport(cfg.to_dict(), pvalues)


def with_overrides(cfg: SimConfig, **kwargs) -> SimConfig:
    return replace(cfg, **kwargs)
