"""Exception hierarchy shared by all bevkit modules.

Each class carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class BevkitError(Exception):
    exit_code = 4


class UsageError(BevkitError):
    exit_code = 1


class BevIOError(BevkitError):
    exit_code = 2


class ValidationError(BevkitError, ValueError):
    exit_code = 3


class ShapeError(ValidationError):
    pass


class ParameterError(ValidationError):
    pass


class ConsistencyError(ValidationError):
    pass


class DistributionError(ValidationError):
    pass


class LabelError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class SpecError(ValidationError):
    pass


class CostmapError(ValidationError):
    pass


class NumericError(BevkitError, ArithmeticError):
    exit_code = 4


class OracleError(NumericError):
    pass


class CompletionError(NumericError):
    pass


class LossError(NumericError):
    pass


class StuckError(BevkitError):
    """No admissible DWA arc exists from the current state."""
