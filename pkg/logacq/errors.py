"""Exception hierarchy shared by all modules."""


class LogAcqError(Exception):
    """Base class for package errors (CLI exit code 1)."""


class DomainError(LogAcqError, ValueError):
    """Special-function argument outside its mathematical domain."""


class FitError(LogAcqError):
    """Covariance factorization failed even after the full jitter ladder."""


class OptimizationError(LogAcqError):
    """Local or multi-start acquisition optimization could not produce a result."""


class ConfigError(LogAcqError, ValueError):
    """Unknown problem/acquisition name or inconsistent run configuration (exit code 2)."""
