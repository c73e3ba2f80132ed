"""Command-line entry point: ``funcassoc {assoc,simulate,relabel,smooth}``.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numeric degeneracy.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .exceptions import DataError, NumericDegeneracy, SamplingTimeout
from .fanova import fanova_test
from .flm import flm_test
from .genotype import (
    count_flips,
    filter_constant_variants,
    genotype_tsv,
    load_genotype_matrix,
    load_phenotype,
    relabel_minimize_flips,
)
from .sim import METHODS, SimulationError, curves_for, load_config, run_experiment, with_overrides
from .skatlite import skatlite_test
from .splines import STRATEGIES

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass
class RunManifest:
    subcommand: str
    inputs: dict
    methods: list = field(default_factory=list)
    smoothing: str | None = None
    relabel: bool | None = None
    permutations: int | None = None
    seed: int | None = None
    output: str = "-"
    version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)

    def comment(self) -> str:
        return "# manifest: " + json.dumps(self.to_dict(), sort_keys=True) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="funcassoc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("assoc", help="test a genotype region for association with group labels")
    p.add_argument("--geno", required=True, help="genotype TSV")
    p.add_argument("--pheno", required=True, help="phenotype TSV (subject, group)")
    p.add_argument("--method", choices=(*METHODS, "all"), default="fanova")
    p.add_argument("--smoothing", choices=STRATEGIES, default="penalized")
    p.add_argument("--relabel", action="store_true", help="minimize 0/2 flips before smoothing")
    p.add_argument("--permutations", type=int, default=999, metavar="I",
                   help="permutations for FLM and SKAT-lite (default 999)")
    p.add_argument("--fanova-pvalue", choices=("asymptotic", "permutation", "both"), default="asymptotic")
    p.add_argument("--grid", type=int, default=None, metavar="M", help="grid size (default 2 x variants)")
    _common(p)

    p = sub.add_parser("simulate", help="run a size/power experiment from a config file")
    p.add_argument("--config", required=True, help="JSON or key = value config")
    p.add_argument("--replicates", type=int, default=None, help="override the replicate count")
    p.add_argument("--json", default=None, help="JSON sidecar path (default: OUTPUT.json)")
    _common(p)

    p = sub.add_parser("relabel", help="recode variants to minimize 0/2 flips")
    p.add_argument("--geno", required=True)
    p.add_argument("--summary", default=None, help="JSON summary path (default: standard error)")
    _common(p, seed=False)

    p = sub.add_parser("smooth", help="write smoothed curves on a grid as TSV")
    p.add_argument("--geno", required=True)
    p.add_argument("--smoothing", choices=STRATEGIES, default="penalized")
    p.add_argument("--relabel", action="store_true")
    p.add_argument("--grid", type=int, default=None, metavar="M")
    _common(p, seed=False)
    return parser


def _common(p, seed=True):
    p.add_argument("--output", "-o", default="-", help="output path or - for standard output")
    if seed:
        p.add_argument("--seed", type=int, default=None, help="master seed (generated and printed if omitted)")
        p.add_argument("--threads", type=int, default=1, help="worker processes, 0 = all cores")


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    seed = int(np.random.SeedSequence().entropy % 2**63)
    print(f"seed: {seed}", file=sys.stderr)
    return seed


@contextmanager
def _open_out(path: str):
    if path == "-":
        yield sys.stdout
        sys.stdout.flush()
    else:
        with open(path, "w", encoding="utf-8") as fh:
            yield fh


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _clean(obj):
    """Make results JSON-safe (numpy scalars, inf)."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def cmd_assoc(args) -> int:
    seed = _resolve_seed(args.seed)
    methods = list(METHODS) if args.method == "all" else [args.method]
    g = filter_constant_variants(load_genotype_matrix(args.geno))
    ph = load_phenotype(args.pheno, g.subject_ids)
    # one stream per method so each record is reproducible on its own
    streams = dict(zip(METHODS, np.random.SeedSequence(seed).spawn(len(METHODS))))
    records = []
    if {"fanova", "flm"} & set(methods):
        grid = curves_for(g, args.smoothing, args.relabel, args.grid)
        if "fanova" in methods:
            perms = 0 if args.fanova_pvalue == "asymptotic" else args.permutations
            out = fanova_test(grid, ph, perms, streams["fanova"]).to_dict()
            if args.fanova_pvalue == "permutation":
                out["p_value"] = out["p_permutation"]
            else:
                out["p_value"] = out["p_asymptotic"]
            records.append({"method": "fanova", **out})
        if "flm" in methods:
            res = flm_test(grid, ph.labels, n_permutations=args.permutations, seed=streams["flm"])
            out = res.to_dict()
            out["p_value"] = res.p_permutation if args.permutations else res.p_chisq
            records.append({"method": "flm", **out})
    if "skatlite" in methods:
        res = skatlite_test(g, ph.labels, args.permutations, streams["skatlite"],
                            satterthwaite=not args.permutations)
        out = res.to_dict()
        out["p_value"] = res.p_permutation if args.permutations else res.p_satterthwaite
        records.append({"method": "skatlite", **out})
    manifest = RunManifest("assoc", {"geno": args.geno, "pheno": args.pheno}, methods, args.smoothing,
                           args.relabel, args.permutations, seed, args.output)
    payload = {"manifest": manifest.to_dict(), "n_subjects": g.n_subjects, "n_variants": g.n_variants,
               "results": records}
    with _open_out(args.output) as fh:
        fh.write(json.dumps(_clean(payload), indent=2) + "\n")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ValueError, TypeError) as exc:
        raise DataError(f"bad config: {exc}") from exc
    overrides = {"n_jobs": args.threads}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.replicates is not None:
        overrides["replicates"] = args.replicates
    cfg = with_overrides(cfg, **overrides)
    report = run_experiment(cfg)
    manifest = RunManifest("simulate", {"config": args.config}, list(cfg.methods), cfg.smoothing_strategy,
                           cfg.relabel, cfg.n_permutations, cfg.seed, args.output)
    with _open_out(args.output) as fh:
        fh.write(manifest.comment())
        fh.write(report.to_tsv())
    sidecar = args.json or (None if args.output == "-" else args.output + ".json")
    doc = json.loads(report.to_json())
    doc["manifest"] = manifest.to_dict()
    text = json.dumps(doc, indent=2) + "\n"
    if sidecar:
        with open(sidecar, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stderr.write(text)
    return EXIT_OK


def cmd_relabel(args) -> int:
    g = load_genotype_matrix(args.geno)
    before = count_flips(g)
    relabeled, mask = relabel_minimize_flips(g)
    manifest = RunManifest("relabel", {"geno": args.geno}, relabel=True, output=args.output)
    with _open_out(args.output) as fh:
        fh.write(manifest.comment())
        fh.write(genotype_tsv(relabeled))
    summary = {
        "manifest": manifest.to_dict(),
        "mask": [bool(m) for m in mask],
        "flipped_variants": [g.variant_ids[j] for j in np.flatnonzero(mask)],
        "flips_before": before,
        "flips_after": count_flips(relabeled),
    }
    text = json.dumps(summary, indent=2) + "\n"
    if args.summary:
        with open(args.summary, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stderr.write(text)
    return EXIT_OK


def cmd_smooth(args) -> int:
    g = load_genotype_matrix(args.geno)
    grid = curves_for(g, args.smoothing, args.relabel, args.grid)
    manifest = RunManifest("smooth", {"geno": args.geno}, smoothing=args.smoothing, relabel=args.relabel,
                           output=args.output)
    with _open_out(args.output) as fh:
        fh.write(manifest.comment())
        fh.write("subject\t" + "\t".join(f"{t:.10g}" for t in grid.grid_points) + "\n")
        for sid, row in zip(g.subject_ids, grid.values):
            fh.write(sid + "\t" + "\t".join(f"{v:.10g}" for v in row) + "\n")
    return EXIT_OK


COMMANDS = {"assoc": cmd_assoc, "simulate": cmd_simulate, "relabel": cmd_relabel, "smooth": cmd_smooth}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    grid = getattr(args, "grid", None)
    if getattr(args, "permutations", 0) < 0 or (grid is not None and grid < 2):
        parser.print_usage(sys.stderr)
        print("funcassoc: error: --permutations must be >= 0 and --grid >= 2", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.__cause__, NumericDegeneracy) else EXIT_DATA
    except NumericDegeneracy as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SamplingTimeout, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
