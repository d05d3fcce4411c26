"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class NumericalError(ArithmeticError):
    """Non-finite values or a failed factorization (CLI exit code 3)."""
