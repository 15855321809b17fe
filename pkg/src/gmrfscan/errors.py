"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid parameters or configuration (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """A numerical routine failed (CLI exit code 3)."""


class ConditioningError(NumericalError):
    """A covariance matrix is not numerically positive definite."""


class DomainError(NumericalError):
    """A determinant functional was evaluated outside its domain."""


class EmptyScanError(NumericalError):
    """Every region of a scan was skipped."""


class NoCrossingError(NumericalError):
    """A risk curve does not straddle the requested level."""

    def __init__(self, message, table=None):
        super().__init__(message)
        self.table = table
