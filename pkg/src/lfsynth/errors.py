"""Exception hierarchy for light-field synthesis.

Every error names the offending operand, field, or file so CLI users can act
on the message without a traceback.
"""


class LightFieldError(Exception):
    """Base class for all lfsynth errors."""

    pass


class ShapeError(LightFieldError, ValueError):
    """Raised when tensor or field extents do not agree."""

    pass


class ArgumentError(LightFieldError, ValueError):
    """Raised when a scalar argument is outside its valid range."""

    pass


class DegenerateInputError(LightFieldError, ValueError):
    """Raised when a statistic is undefined for the input (e.g. variance of one view)."""

    pass


class FormatError(LightFieldError, ValueError):
    """Raised when a file on disk does not match its declared format."""

    pass


class ConfigError(LightFieldError, ValueError):
    """Raised when a configuration is well-typed but geometrically invalid."""

    pass


class IncompatibilityError(LightFieldError, ValueError):
    """Raised when a checkpoint was produced by a different network configuration."""

    def __init__(self, message: str, field: str | None = None) -> None:
        super().__init__(message)
        self.field = field


class NumericError(LightFieldError, ArithmeticError):
    """Raised when a forward or backward pass produces NaN or Inf."""

    def __init__(self, message: str, operation: str | None = None) -> None:
        super().__init__(message)
        self.operation = operation


class TrainingDivergedError(NumericError):
    """Raised when a loss term becomes non-finite during training."""

    def __init__(self, iteration: int, term: str) -> None:
        super().__init__(
            f"Training diverged at iteration {iteration}: loss term '{term}' is not finite",
            operation=term,
        )
        self.iteration = iteration
        self.term = term


__all__ = [
    "ArgumentError",
    "ConfigError",
    "DegenerateInputError",
    "FormatError",
    "IncompatibilityError",
    "LightFieldError",
    "NumericError",
    "ShapeError",
    "TrainingDivergedError",
]
