"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so every failure mode that a user can
trigger should surface as one of the classes below.
"""

from __future__ import annotations


class WedgeFEError(Exception):
    """Base class for all package errors."""


class DesignError(WedgeFEError, ValueError):
    """Invalid trial design, structure, or index combination."""


class DataError(WedgeFEError, ValueError):
    """Malformed or inconsistent trial data."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class CollinearityError(DataError):
    """Design matrix is rank deficient beyond the expected absorbed columns."""

    def __init__(self, message: str, columns: list[str] | None = None):
        self.columns = list(columns or [])
        super().__init__(message)


class DegenerateClusterError(DataError):
    """A cluster has too few enrolled rows for within-cluster centering."""


class ConvergenceError(WedgeFEError, RuntimeError):
    """Iterative fit failed to converge."""

    def __init__(self, message: str, grad_norm: float | None = None):
        self.grad_norm = grad_norm
        super().__init__(message)


class SeparationError(ConvergenceError):
    """A coefficient diverges because an indicator cell has no events."""


class QuadratureError(WedgeFEError, RuntimeError):
    """Numerical integration did not reach the requested accuracy."""

    def __init__(self, message: str, achieved: float | None = None):
        self.achieved = achieved
        super().__init__(message)
