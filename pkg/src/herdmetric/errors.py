"""Exception hierarchy shared across the package.

Each class maps onto one CLI exit code (see ``herdmetric.cli``).
"""


class HerdMetricError(Exception):
    exit_code = 1


class ConfigurationError(HerdMetricError, ValueError):
    exit_code = 2


class DimensionError(HerdMetricError, ValueError):
    exit_code = 3


class ValidationError(HerdMetricError, ValueError):
    exit_code = 3


class SamplingError(ValidationError):
    pass


class MiningError(ValidationError):
    pass


class EvaluationError(ValidationError):
    pass


class InstabilityError(HerdMetricError, ArithmeticError):
    exit_code = 4
