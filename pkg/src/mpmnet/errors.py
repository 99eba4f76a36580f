"""Exception hierarchy shared by every mpmnet module."""


class MpmnetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MpmnetError, ValueError):
    pass


class DomainError(MpmnetError, ValueError):
    pass


class NumericError(MpmnetError, ArithmeticError):
    pass


class EmptyBatchError(MpmnetError, ValueError):
    pass


class InsufficientSamplesError(MpmnetError, ValueError):
    pass


class DegenerateStatsError(MpmnetError, ValueError):
    pass


class InfeasibleError(MpmnetError, ValueError):
    """Raised when the hyperplane constraint cannot be met (equal class means)."""


class ConfigError(MpmnetError, ValueError):
    pass


class StateError(MpmnetError, RuntimeError):
    pass


class FormatError(MpmnetError, ValueError):
    pass


class LengthError(FormatError):
    pass


class TaskError(MpmnetError, ValueError):
    pass


class IntegrityError(MpmnetError, ValueError):
    """Checkpoint manifest and array files disagree."""


class EvaluationError(MpmnetError, ValueError):
    pass
