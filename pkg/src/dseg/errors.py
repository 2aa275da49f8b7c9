"""Shared exception types."""


class DsegError(Exception):
    """Base class for all package errors."""


class ValidationError(DsegError):
    """A value object violates its declared invariants."""


class PlacementError(DsegError):
    """Random blob placement failed after bounded retries."""


class ConfigurationError(DsegError):
    """Inconsistent or infeasible configuration."""


class DataError(DsegError):
    """Input data violates a precondition (NaN, shape mismatch, ...)."""


class FormatError(DsegError):
    """An on-disk container is corrupt, truncated, or has the wrong magic."""


class SchedulingError(DsegError):
    """A training batch violates the required label composition."""


class NumericError(DsegError):
    """A non-finite value appeared where finiteness is required."""


class LoadError(DsegError):
    """A checkpoint cannot be loaded or does not match its configuration."""
