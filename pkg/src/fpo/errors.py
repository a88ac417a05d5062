"""Exception types raised across the package."""


class FPOError(Exception):
    """Base class for all package errors."""


class DomainError(FPOError, ValueError):
    """Argument outside the domain of a generator or operation."""


class NonFiniteError(FPOError, ArithmeticError):
    """A computation produced inf or nan."""


class ShapeError(FPOError, ValueError):
    """Policies, tables or batches with incompatible shapes."""


class SupportError(FPOError, ValueError):
    """Distributions whose supports make a divergence undefined."""


class ConfigError(FPOError, ValueError):
    """Invalid or inconsistent configuration."""


class DegenerateRewardError(FPOError, ValueError):
    """Reward values that cannot be turned into preference weights."""


class LengthError(FPOError, ValueError):
    """Response lengths that are missing or non-positive."""


class DivergenceError(FPOError, ArithmeticError):
    """Training produced a non-finite loss or parameters."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class OptimizationError(FPOError, RuntimeError):
    """No optimization start converged."""
