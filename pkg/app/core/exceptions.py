"""Custom application exceptions."""

from typing import Optional


class A3Exception(Exception):
    """Base exception for the compression toolkit."""

    exit_code = 1

    def __init__(self, message: str, details: Optional[str] = None):
        self.message = message
        self.details = details
        super().__init__(self.message)


class ConfigurationError(A3Exception):
    """Exception raised when configuration is invalid."""
    exit_code = 2


class ArgumentError(A3Exception, ValueError):
    """Exception raised when an operation receives an invalid argument."""
    exit_code = 2


class NumericalError(A3Exception):
    """Exception raised when a numerical routine cannot produce a result."""
    exit_code = 3


class SvdConvergenceError(NumericalError):
    """Exception raised when the SVD iteration does not converge."""

    def __init__(self, rows: int, cols: int, attempts: int):
        self.rows = rows
        self.cols = cols
        self.attempts = attempts
        super().__init__(
            f"SVD did not converge for a {rows}x{cols} matrix",
            details=f"LAPACK drivers attempted: {attempts}",
        )


class DegenerateMatrixError(NumericalError):
    """Exception raised when a statistic is not positive semi-definite."""

    def __init__(self, message: str, eigenvalue: float):
        self.eigenvalue = eigenvalue
        super().__init__(message, details=f"eigenvalue={eigenvalue!r}")


class EmptyCalibrationError(NumericalError):
    """Exception raised when statistics are finalized without samples."""
    pass


class InfeasibleBudgetError(NumericalError):
    """Exception raised when no rank allocation meets the parameter budget."""
    pass


class StoreError(A3Exception):
    """Exception raised when tensor store operations fail."""
    exit_code = 4
