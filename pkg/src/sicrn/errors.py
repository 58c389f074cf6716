"""Exception types shared across the package."""


class SicrnError(Exception):
    """Base class for all package errors."""


class ArgumentError(SicrnError, ValueError):
    """Bad argument: wrong length, shape, or out-of-range value."""


class NumericError(SicrnError, ArithmeticError):
    """Non-finite or singular values encountered during computation."""


class UsageError(SicrnError, RuntimeError):
    """API misuse, e.g. mixing tapes or calling backward on a non-scalar."""


class FormatError(SicrnError, ValueError):
    """Malformed or unsupported file content."""
