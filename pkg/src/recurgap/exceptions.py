"""Exception hierarchy shared by the package."""


class RecurGapError(Exception):
    """Base class for all package errors."""


class ModelDomainError(RecurGapError, ValueError):
    """Parameter value outside the region where the model is defined."""


class ContractError(RecurGapError, ValueError):
    """Inputs violate a documented precondition (shapes, emptiness, ...)."""


class EvaluationError(RecurGapError, ArithmeticError):
    """Non-finite mean/scale encountered while evaluating an estimating function.

    ``index`` holds the zero-based ``(subject, event)`` position that failed.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class GenerationError(RecurGapError, RuntimeError):
    """Simulation of a subject path did not terminate."""


class TidyParseError(RecurGapError, ValueError):
    """Malformed tidy CSV input. ``line`` is the 1-based line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(RecurGapError, ValueError):
    """Bad or missing key in a key=value configuration file."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class SingularJacobianError(RecurGapError, ArithmeticError):
    """Derivative matrix is numerically singular."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class DegenerateDataError(RecurGapError, ArithmeticError):
    """Dataset carries no information about a parameter (e.g. zero slope in sigma^2)."""
