"""Functional association tests for sequence variants in a genomic region.

Genotype codes are turned into smooth curves over the (rescaled) region, and
case/control differences between the curves are tested with a functional
analysis of variance. A functional linear model and a trend-statistic
kernel test are provided as comparators, plus a simulation harness for size
and power studies.
"""

from importlib.metadata import PackageNotFoundError, version

from .exceptions import (
    DataError,
    FuncAssocError,
    NumericDegeneracy,
)
from .fanova import FanovaResult, FanovaTest, fanova_test, satterthwaite_kappa, squared_distance_matrix
from .flm import FLMTest, FlmResult, flm_test
from .genotype import (
    GenotypeMatrix,
    GenotypeRelabeler,
    Phenotype,
    count_flips,
    load_genotype_matrix,
    load_phenotype,
    relabel_minimize_flips,
)
from .skatlite import SkatLiteResult, SkatLiteTest, skatlite_test
from .splines import (
    BasisSpec,
    CurveGrid,
    GenotypeSmoother,
    SmoothCurve,
    bspline_basis_matrix,
    discretize_curves,
    fit_penalized,
    gcv_select_lambda,
    make_knots,
    penalty_matrix,
    smooth_codes,
)

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

__all__ = [
    "BasisSpec",
    "CurveGrid",
    "DataError",
    "FLMTest",
    "FanovaResult",
    "FanovaTest",
    "FlmResult",
    "FuncAssocError",
    "GenotypeMatrix",
    "GenotypeRelabeler",
    "GenotypeSmoother",
    "NumericDegeneracy",
    "Phenotype",
    "SkatLiteResult",
    "SkatLiteTest",
    "SmoothCurve",
    "bspline_basis_matrix",
    "count_flips",
    "discretize_curves",
    "fanova_test",
    "fit_penalized",
    "flm_test",
    "gcv_select_lambda",
    "load_genotype_matrix",
    "load_phenotype",
    "make_knots",
    "penalty_matrix",
    "relabel_minimize_flips",
    "satterthwaite_kappa",
    "skatlite_test",
    "smooth_codes",
    "squared_distance_matrix",
]
