"""Exception hierarchy shared across the package."""


class ModeError(Exception):
    """Base class for all package errors."""


class ContractError(ModeError, ValueError):
    """A precondition on an operation's arguments was violated."""


class ValidationError(ModeError, ValueError):
    """Data failed an invariant check (non-finite values, bad labels, ...)."""


class FormatError(ModeError, ValueError):
    """A binary file has the wrong magic, version, or structure."""


class CorruptionError(ModeError, ValueError):
    """A binary file is truncated or internally inconsistent."""


class NormalizationError(ModeError, ValueError):
    """A vector with zero L2 norm cannot be normalized."""


class GradientError(ModeError, ArithmeticError):
    """A non-finite value appeared during gradient computation."""


class NumericError(ModeError, ArithmeticError):
    """A numeric failure outside gradient computation (diverged loss, ...)."""
