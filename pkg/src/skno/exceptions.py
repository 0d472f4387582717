class SknoError(Exception):
    """Base class for errors raised by this package."""


class UsageError(SknoError, ValueError):
    """Invalid arguments, shapes or configuration."""


class NumericError(SknoError, ArithmeticError):
    """Non-finite values or a solver that failed to converge."""


class SymmetryError(NumericError):
    """Inverse transform of a real field left a non-negligible imaginary part."""
