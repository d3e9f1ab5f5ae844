"""Exception types shared across the package."""


class PaonError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PaonError, ValueError):
    """Invalid shapes, degrees, presets or config files."""


class UsageError(PaonError, ValueError):
    """An API was called outside its contract (wrong arity, non-scalar loss, ...)."""


class NumericDomainError(PaonError, ArithmeticError):
    """A value left the numeric domain of an operation (zero divisor, NaN, Inf)."""
