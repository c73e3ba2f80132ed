"""Genotype matrices: loading, filtering, and 0/2 relabeling.

Codes are stored as a float array with ``nan`` marking a missing call so that
the smoothing code can consume them without conversion.
"""

from __future__ import annotations

import io
import itertools
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence, TextIO

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    EmptyRegion,
    GroupError,
    ParseError,
    PositionError,
    ShapeError,
    TooLargeForOracle,
)

MISSING_TOKEN = "NA"
_VALID_CODES = {"0": 0.0, "1": 1.0, "2": 2.0}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def normalize_positions(raw: Sequence[float]) -> np.ndarray:
    """Min-max scale strictly increasing coordinates onto [0, 1]."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 1:
        raise PositionError("positions must be one-dimensional")
    if raw.size == 0:
        return raw.copy()
    if not np.all(np.isfinite(raw)):
        raise PositionError("positions must be finite")
    if np.any(np.diff(raw) <= 0):
        raise PositionError("positions must be strictly increasing (no duplicates)")
    if raw.size == 1:
        return np.zeros(1)
    out = (raw - raw[0]) / (raw[-1] - raw[0])
    out[0], out[-1] = 0.0, 1.0
    return out


@dataclass(frozen=True)
class GenotypeMatrix:
    """Subjects x variants genotype codes in {0, 1, 2} (``nan`` = missing).

    ``positions`` are normalized to [0, 1]; ``raw_positions`` keeps whatever the
    input carried so that relabeled data can be written back unchanged.
    """

    codes: np.ndarray
    positions: np.ndarray
    variant_ids: tuple = ()
    subject_ids: tuple = ()
    raw_positions: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=float)
        if codes.ndim != 2:
            raise ShapeError(f"codes must be 2-D, got shape {codes.shape}")
        n, t = codes.shape
        observed = codes[~np.isnan(codes)]
        if not np.isin(observed, (0.0, 1.0, 2.0)).all():
            raise ParseError("genotype codes must be 0, 1, 2 or missing")
        positions = np.asarray(self.positions, dtype=float)
        if positions.shape != (t,):
            raise ShapeError(f"expected {t} positions, got {positions.shape}")
        if t >= 2 and (np.any(np.diff(positions) <= 0) or positions[0] != 0.0 or positions[-1] != 1.0):
            raise PositionError("positions must increase strictly from 0 to 1")
        variant_ids = tuple(self.variant_ids) or tuple(f"v{j + 1}" for j in range(t))
        subject_ids = tuple(self.subject_ids) or tuple(f"s{i + 1}" for i in range(n))
        if len(variant_ids) != t or len(subject_ids) != n:
            raise ShapeError("id labels do not match the code matrix")
        raw = self.raw_positions
        raw = positions if raw is None else np.asarray(raw, dtype=float)
        object.__setattr__(self, "codes", _frozen(codes))
        object.__setattr__(self, "positions", _frozen(positions))
        object.__setattr__(self, "variant_ids", variant_ids)
        object.__setattr__(self, "subject_ids", subject_ids)
        object.__setattr__(self, "raw_positions", _frozen(raw))

    @property
    def n_subjects(self) -> int:
        return self.codes.shape[0]

    @property
    def n_variants(self) -> int:
        return self.codes.shape[1]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.codes)

    @classmethod
    def from_codes(cls, codes, positions=None, **kwargs) -> "GenotypeMatrix":
        """Build from an array; ``positions`` are raw coordinates (equally
        spaced when omitted)."""
        codes = np.asarray(codes, dtype=float)
        if codes.ndim == 1:
            codes = codes[None, :]
        t = codes.shape[1]
        raw = np.arange(t, dtype=float) if positions is None else np.asarray(positions, dtype=float)
        return cls(codes, normalize_positions(raw), raw_positions=raw, **kwargs)

    def select_variants(self, keep: np.ndarray) -> "GenotypeMatrix":
        keep = np.asarray(keep)
        raw = self.raw_positions[keep]
        return GenotypeMatrix(
            self.codes[:, keep],
            normalize_positions(raw) if raw.size else raw,
            tuple(np.asarray(self.variant_ids, dtype=object)[keep]),
            self.subject_ids,
            raw,
        )

    def with_codes(self, codes: np.ndarray) -> "GenotypeMatrix":
        return replace(self, codes=codes)


@dataclass(frozen=True)
class Phenotype:
    """Group membership of each subject, labels recoded to 0..k-1."""

    labels: np.ndarray
    group_names: tuple = ()

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.size == 0:
            raise GroupError("labels must be a non-empty 1-D array")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise GroupError("labels must be integer group indices")
            labels = labels.astype(int)
        k = int(labels.max()) + 1
        if labels.min() < 0:
            raise GroupError("group indices must be non-negative")
        sizes = np.bincount(labels, minlength=k)
        if np.any(sizes == 0):
            raise GroupError(f"empty group(s): {np.flatnonzero(sizes == 0).tolist()}")
        names = tuple(self.group_names) or tuple(str(g) for g in range(k))
        if len(names) != k:
            raise GroupError("group_names does not match the number of groups")
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "group_names", names)

    @property
    def k(self) -> int:
        return len(self.group_names)

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    @property
    def n(self) -> int:
        return self.labels.size

    @classmethod
    def from_labels(cls, values: Iterable) -> "Phenotype":
        """Encode arbitrary labels; integer-like labels keep their numeric order."""
        values = list(values)
        try:
            keys = sorted(set(values), key=float)
        except (TypeError, ValueError):
            keys = sorted(set(map(str, values)))
            values = list(map(str, values))
        index = {v: i for i, v in enumerate(keys)}
        return cls(np.array([index[v] for v in values]), tuple(str(v) for v in keys))


def _open_text(source) -> TextIO:
    if isinstance(source, (str, os.PathLike)):
        return open(source, encoding="utf-8")
    return source


def _data_lines(fh) -> list[list[str]]:
    """Whitespace-split non-blank lines; ``#`` lines are comments."""
    return [ln.split() for ln in fh.read().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]


def _parse_positions(tokens: list[str]) -> tuple[np.ndarray, bool]:
    try:
        return np.array([float(tok) for tok in tokens]), True
    except ValueError:
        pass
    if all(tok in (MISSING_TOKEN, ".") for tok in tokens) or not any(
        _is_number(tok) for tok in tokens
    ):
        # no coordinates available: treat variants as equally spaced
        return np.arange(len(tokens), dtype=float), False
    raise PositionError("header mixes numeric and non-numeric positions")


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def load_genotype_matrix(source) -> GenotypeMatrix:
    """Read a genotype table.

    The first line is ``pos`` followed by one raw coordinate per variant; each
    following line is a subject id and one code (0/1/2/NA) per variant. Columns
    may be separated by tabs or runs of whitespace; lines starting with ``#``
    are ignored.
    """
    fh = _open_text(source)
    try:
        lines = _data_lines(fh)
    finally:
        if fh is not source:
            fh.close()
    if not lines:
        raise ShapeError("empty genotype file")
    header = lines[0][1:]
    if not header:
        raise ShapeError("header lists no variants")
    raw, _ = _parse_positions(header)
    positions = normalize_positions(raw)
    t = len(header)
    subject_ids, rows = [], []
    for lineno, tokens in enumerate(lines[1:], start=2):
        if len(tokens) != t + 1:
            raise ShapeError(f"line {lineno}: expected {t + 1} fields, got {len(tokens)}")
        row = []
        for tok in tokens[1:]:
            if tok == MISSING_TOKEN:
                row.append(np.nan)
            elif tok in _VALID_CODES:
                row.append(_VALID_CODES[tok])
            else:
                raise ParseError(f"line {lineno}: invalid genotype token {tok!r}")
        subject_ids.append(tokens[0])
        rows.append(row)
    if len(set(subject_ids)) != len(subject_ids):
        raise ShapeError("duplicate subject ids")
    codes = np.array(rows, dtype=float).reshape(len(rows), t)
    return GenotypeMatrix(codes, positions, tuple(header), tuple(subject_ids), raw)


def write_genotype_matrix(g: GenotypeMatrix, dest) -> None:
    """Write ``g`` in the format read by :func:`load_genotype_matrix`."""
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8") as fh:
            write_genotype_matrix(g, fh)
        return
    dest.write("pos\t" + "\t".join(f"{p:g}" for p in g.raw_positions) + "\n")
    for sid, row in zip(g.subject_ids, g.codes):
        toks = (MISSING_TOKEN if np.isnan(c) else str(int(c)) for c in row)
        dest.write(sid + "\t" + "\t".join(toks) + "\n")


def load_phenotype(source, subject_ids: Sequence[str] | None = None) -> Phenotype:
    """Read ``subject_id<TAB>group`` lines, optionally reordered to ``subject_ids``."""
    fh = _open_text(source)
    try:
        pairs = _data_lines(fh)
    finally:
        if fh is not source:
            fh.close()
    for lineno, p in enumerate(pairs, start=1):
        if len(p) != 2:
            raise ShapeError(f"phenotype line {lineno}: expected 2 fields, got {len(p)}")
    mapping = dict(pairs)
    if len(mapping) != len(pairs):
        raise ShapeError("duplicate subject ids in phenotype file")
    if subject_ids is None:
        return Phenotype.from_labels([g for _, g in pairs])
    missing = [s for s in subject_ids if s not in mapping]
    if missing:
        raise ShapeError(f"no phenotype for subjects {missing[:5]}")
    return Phenotype.from_labels([mapping[s] for s in subject_ids])


def filter_constant_variants(g: GenotypeMatrix) -> GenotypeMatrix:
    """Drop variants with fewer than two distinct observed codes."""
    codes = g.codes
    lo = np.nanmin(np.where(np.isnan(codes), np.inf, codes), axis=0)
    hi = np.nanmax(np.where(np.isnan(codes), -np.inf, codes), axis=0)
    keep = np.isfinite(lo) & (hi > lo)
    if not keep.any():
        raise EmptyRegion("every variant is constant across subjects")
    if keep.all():
        return g
    return g.select_variants(np.flatnonzero(keep))


# ---------------------------------------------------------------------------
# flip objective
# ---------------------------------------------------------------------------


def _codes(g) -> np.ndarray:
    return g.codes if isinstance(g, GenotypeMatrix) else np.asarray(g, dtype=float)


def _pair_costs(codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per adjacent column pair, the 0/2 adjacency count when both columns keep
    the same orientation (``same``) and when exactly one is flipped (``diff``).
    Missing entries never match either pattern."""
    left, right = codes[:, :-1], codes[:, 1:]
    same = ((left == 0) & (right == 2)) | ((left == 2) & (right == 0))
    diff = ((left == 0) & (right == 0)) | ((left == 2) & (right == 2))
    return same.sum(axis=0), diff.sum(axis=0)


def count_flips(g) -> int:
    """Number of adjacent (0, 2) or (2, 0) pairs summed over subjects."""
    codes = _codes(g)
    if codes.shape[1] < 2:
        return 0
    return int(_pair_costs(codes)[0].sum())


def apply_flip_mask(g, mask):
    """Recode flagged columns 0 <-> 2. Works on arrays and GenotypeMatrix."""
    codes = _codes(g)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (codes.shape[1],):
        raise ShapeError("flip mask length does not match the number of variants")
    out = codes.copy()
    out[:, mask] = 2.0 - codes[:, mask]
    return g.with_codes(out) if isinstance(g, GenotypeMatrix) else out


def min_flip_mask(codes: np.ndarray) -> np.ndarray:
    """Exact minimizer of :func:`count_flips` over all column flip masks.

    The objective only couples neighbouring columns and depends on whether
    their orientations agree, so a two-state chain DP is exact. Cost is the
    pair ``(flips, flipped columns)`` compared lexicographically; the forward
    pass prefers "not flipped" on ties, which yields the lexicographically
    smallest optimal mask.
    """
    codes = np.asarray(codes, dtype=float)
    t = codes.shape[1]
    if t == 0:
        return np.zeros(0, dtype=bool)
    same, diff = _pair_costs(codes)
    # suffix[j, s] = best (flips, n_flipped) for columns j.. given column j in state s
    suffix = np.zeros((t, 2, 2), dtype=np.int64)
    suffix[t - 1, 1] = (0, 1)
    for j in range(t - 2, -1, -1):
        for s in (0, 1):
            options = []
            for s_next in (0, 1):
                pair = same[j] if s == s_next else diff[j]
                options.append((pair + suffix[j + 1, s_next, 0], s + suffix[j + 1, s_next, 1]))
            suffix[j, s] = min(options)
    mask = np.zeros(t, dtype=bool)
    mask[0] = tuple(suffix[0, 1]) < tuple(suffix[0, 0])
    for j in range(1, t):
        prev = int(mask[j - 1])
        best = None
        for s in (0, 1):
            pair = same[j - 1] if s == prev else diff[j - 1]
            cost = (pair + suffix[j, s, 0], suffix[j, s, 1])
            if best is None or cost < best[0]:
                best = (cost, s)
        mask[j] = bool(best[1])
    return mask


def relabel_minimize_flips(g: GenotypeMatrix) -> tuple[GenotypeMatrix, np.ndarray]:
    """Return the flip-minimizing recoding of ``g`` and the mask used."""
    mask = min_flip_mask(g.codes)
    return apply_flip_mask(g, mask), mask


def brute_force_min_flips(g, max_variants: int = 20) -> tuple[int, np.ndarray]:
    """Exhaustive search over all 2**T masks, same tie-breaking as the DP."""
    codes = _codes(g)
    t = codes.shape[1]
    if t > max_variants:
        raise TooLargeForOracle(f"{t} variants exceeds the oracle limit of {max_variants}")
    best_key, best_mask = None, None
    for bits in itertools.product((False, True), repeat=t):
        mask = np.array(bits, dtype=bool)
        key = (count_flips(apply_flip_mask(codes, mask)), int(mask.sum()), bits)
        if best_key is None or key < best_key:
            best_key, best_mask = key, mask
    return best_key[0], best_mask


# ---------------------------------------------------------------------------
# estimator-style wrappers
# ---------------------------------------------------------------------------


def check_genotypes(X, *, allow_nan: bool = True) -> np.ndarray:
    """Validate a subjects x variants code array and return it as float."""
    if isinstance(X, GenotypeMatrix):
        X = X.codes
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ShapeError(f"expected a 2-D genotype array, got {X.ndim}-D")
    nan = np.isnan(X)
    if nan.any() and not allow_nan:
        raise ParseError("missing genotypes are not allowed here")
    if not np.isin(X[~nan], (0.0, 1.0, 2.0)).all():
        raise ParseError("genotype codes must be 0, 1, 2 or missing")
    return X


class GenotypeRelabeler(TransformerMixin, BaseEstimator):
    """Learn the 0/2 recoding that minimizes adjacent flips, then apply it.

    Attributes
    ----------
    mask_ : ndarray of bool
        Columns recoded 0 <-> 2.
    flips_before_, flips_after_ : int
        Flip counts on the training data.
    """

    def fit(self, X, y=None):
        X = check_genotypes(X)
        self.mask_ = min_flip_mask(X)
        self.n_features_in_ = X.shape[1]
        self.flips_before_ = count_flips(X)
        self.flips_after_ = count_flips(apply_flip_mask(X, self.mask_))
        return self

    def transform(self, X):
        check_is_fitted(self, "mask_")
        X = check_genotypes(X)
        return apply_flip_mask(X, self.mask_)

    def inverse_transform(self, X):
        return self.transform(X)


def genotype_tsv(g: GenotypeMatrix) -> str:
    buf = io.StringIO()
    write_genotype_matrix(g, buf)
    return buf.getvalue()
