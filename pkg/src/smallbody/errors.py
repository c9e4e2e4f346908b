"""Exception hierarchy shared across the package."""


class SmallBodyError(Exception):
    """Base class for all package errors."""


class SingularEvaluationError(SmallBodyError):
    """Kernel evaluated at coincident (or node-coincident) points."""


class InvariantViolation(SmallBodyError):
    """A physical invariant (passivity, spacing, size regime) is broken."""


class SolverFailure(SmallBodyError):
    """A linear solve or fixed-point iteration did not converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InfeasibleDesign(SmallBodyError):
    """A requested particle density cannot be realized under d >= 10a."""
