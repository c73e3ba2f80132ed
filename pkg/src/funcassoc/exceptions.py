"""Exception hierarchy.

Two families matter to callers (and to the CLI exit codes): ``DataError`` for
malformed or unusable input, and ``NumericDegeneracy`` for inputs that parse
fine but leave a statistic undefined.
"""


class FuncAssocError(Exception):
    """Base class for every error raised by this package."""


class DataError(FuncAssocError, ValueError):
    """Input data is malformed or carries no usable information."""


class ParseError(DataError):
    pass


class PositionError(DataError):
    pass


class ShapeError(DataError):
    pass


class EmptyRegion(DataError):
    """Every variant in the region is constant."""


class TooLargeForOracle(DataError):
    pass


class BasisError(DataError):
    pass


class DomainError(DataError):
    pass


class InsufficientData(DataError):
    pass


class GridError(DataError):
    pass


class GroupError(DataError):
    pass


class ZeroWithinDf(GroupError):
    """n == k, so the within-group degrees of freedom vanish."""


class SamplingTimeout(FuncAssocError, RuntimeError):
    pass


class NumericDegeneracy(FuncAssocError, ArithmeticError):
    """A statistic is undefined for otherwise valid input."""


class GcvError(NumericDegeneracy):
    pass


class DegenerateDenominator(NumericDegeneracy):
    pass


class DegenerateCovariance(NumericDegeneracy):
    pass


class NumericError(NumericDegeneracy):
    pass
