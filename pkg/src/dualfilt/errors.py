"""Exception hierarchy for dualfilt.

Validation failures map to CLI exit code 2, numerical failures to exit
code 3 (see cli.py).
"""


class DualfiltError(Exception):
    """Base class for all dualfilt errors."""


class ValidationError(DualfiltError):
    """Bad model, config, or argument; CLI exit code 2."""


class NumericalError(DualfiltError):
    """Runtime numerical failure; CLI exit code 3."""


class RowSumViolation(ValidationError):
    pass


class NegativeRate(ValidationError):
    pass


class InvalidSimplex(ValidationError):
    pass


class NonFinite(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class GridMismatch(ValidationError):
    pass


class ConfigParseError(ValidationError):
    pass


class UnknownSubcommand(ValidationError):
    pass


class SingularPrior(ValidationError):
    pass


class FeatureCountTooLarge(ValidationError):
    pass


class NonConvergedExpm(NumericalError):
    pass


class DegenerateMass(NumericalError):
    pass


class CovarianceBlowup(NumericalError):
    pass


class MaxIterationsExceeded(NumericalError):
    pass


class SolverFailure(NumericalError):
    pass


class IllConditionedRegression(NumericalError):
    pass
