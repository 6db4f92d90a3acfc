"""Exception types shared across the package."""


class PwdysonError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PwdysonError):
    """Inconsistent or invalid configuration / input values."""


class NonConvergenceError(PwdysonError):
    """An iterative solver exhausted its iteration budget.

    Carries the last residual (and, for the outer solver, a partial
    report) so callers can diagnose or salvage the run.
    """

    def __init__(self, message, residual=None, report=None):
        super().__init__(message)
        self.residual = residual
        self.report = report


class InvariantViolationError(PwdysonError):
    """A verification check found a violated mathematical property."""


class ArchiveError(PwdysonError):
    """Ground-state archive is malformed, truncated or incompatible."""
