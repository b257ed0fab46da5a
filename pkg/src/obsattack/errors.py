"""Exception types raised across the package."""


class ObsAttackError(Exception):
    """Base class for all package errors."""


class ValidationError(ObsAttackError, ValueError):
    pass


class NumericError(ObsAttackError, ArithmeticError):
    pass


class ConfigurationError(ObsAttackError, ValueError):
    pass


class UnsupportedOperationError(ObsAttackError, TypeError):
    pass


class SizeError(ObsAttackError, ValueError):
    """Raised when an exhaustive enumeration would exceed its cap."""

    def __init__(self, message: str, count: int):
        super().__init__(message)
        self.count = count


class TrainingError(ObsAttackError, RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
