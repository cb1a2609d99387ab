"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition or invariant."""


class PreconditionError(ValidationError):
    """An estimator refused to run because its statistical precondition fails."""


class ConvergenceWarning(UserWarning):
    """A fixed-point or regularised iteration stopped before its tolerance."""
