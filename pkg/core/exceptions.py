"""Exception hierarchy shared by the numerical modules and the commands."""

from typing import Any, List, Optional


class MultiscaleGPError(Exception):
    """Base class for every error raised by the toolkit."""


class DomainError(MultiscaleGPError, ValueError):
    """An input lies outside the domain of an operation."""


class ConfigError(MultiscaleGPError, ValueError):
    """A configuration value or precondition on sizes is invalid."""


class ConstraintViolationError(DomainError):
    """Bivariate Matérn parameters violate the validity conditions."""

    def __init__(self, message: str, report: Any = None):
        super().__init__(message)
        self.report = report


class NumericalError(MultiscaleGPError, ArithmeticError):
    """A numerical procedure failed (factorization, solver, realization)."""

    def __init__(
        self,
        message: str,
        min_pivot: Optional[float] = None,
        residuals: Optional[List[float]] = None,
        index: Optional[int] = None,
    ):
        super().__init__(message)
        self.min_pivot = min_pivot
        self.residuals = residuals or []
        self.index = index


class OptimizationError(NumericalError):
    """Every start of a hyperparameter fit failed."""

    def __init__(self, message: str, diagnostics: Optional[List[dict]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []
