import numpy as np
import pytest

from funcassoc.genotype import GenotypeMatrix, Phenotype


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_codes(rng, n, t, p_missing=0.0):
    codes = rng.integers(0, 3, size=(n, t)).astype(float)
    if p_missing:
        codes[rng.random((n, t)) < p_missing] = np.nan
    return codes


@pytest.fixture
def small_region(rng):
    """40 subjects x 25 variants at irregular positions, two balanced groups."""
    raw = np.sort(rng.choice(np.arange(1, 5000), size=25, replace=False)).astype(float)
    codes = random_codes(rng, 40, 25)
    g = GenotypeMatrix.from_codes(codes, raw)
    ph = Phenotype(np.repeat([0, 1], 20), ("control", "case"))
    return g, ph
