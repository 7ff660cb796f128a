"""Exception types shared across the package."""


class SasLabError(Exception):
    pass


class ConfigError(SasLabError, ValueError):
    """Invalid configuration value; ``key`` names the offending field when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ShapeError(SasLabError, ValueError):
    pass


class UsageError(SasLabError, RuntimeError):
    pass


class NumericError(SasLabError, FloatingPointError):
    """Non-finite value encountered; ``name`` identifies the tensor if known."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name
