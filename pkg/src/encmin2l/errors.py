"""Exception types shared across the package."""


class Error(Exception):
    """Base class for all package errors."""


class ValidationError(Error):
    """Bad argument values or violated invariants (CLI exit code 1)."""


class FormatError(ValidationError):
    """Malformed binary file: bad magic, version, or truncated payload."""


class StiffIntegrationError(Error):
    """Adaptive ODE step size underflowed."""


class TrainingDivergedError(Error):
    """Validation loss became non-finite during training."""
