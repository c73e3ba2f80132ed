"""Shared permutation plumbing."""

from __future__ import annotations

import numpy as np


def permuted_copies(values: np.ndarray, n_permutations: int, seed) -> np.ndarray:
    """``n_permutations`` independent shuffles of ``values`` as rows.

    All shuffles come from a single generator seeded by ``seed``, so the result
    does not depend on how callers later split the rows across workers.
    """
    if n_permutations < 1:
        raise ValueError("need at least one permutation")
    rng = np.random.default_rng(seed)
    values = np.asarray(values)
    return rng.permuted(np.broadcast_to(values, (n_permutations, values.size)), axis=1)


def add_one_pvalue(n_extreme: int, n_permutations: int) -> float:
    """``(#{as extreme} + 1) / (I + 1)``; never zero."""
    return (int(n_extreme) + 1.0) / (n_permutations + 1.0)


def chunks(total: int, size: int):
    for start in range(0, total, size):
        yield slice(start, min(start + size, total))
