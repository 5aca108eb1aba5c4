"""Exceptions raised across the toolkit, each mapped to a CLI exit code."""


class LatentDemandError(Exception):
    """Base class for errors caused by inputs rather than bugs."""
    exit_code = 1


class ValidationError(LatentDemandError, ValueError):
    """Input data or configuration is malformed or inconsistent."""
    exit_code = 2


class DomainError(LatentDemandError, ValueError):
    """A mathematical precondition does not hold (shapes, positivity, ranges)."""
    exit_code = 2


class NumericalError(LatentDemandError, ArithmeticError):
    """NaN or Inf showed up where finite values are required."""
    exit_code = 3
