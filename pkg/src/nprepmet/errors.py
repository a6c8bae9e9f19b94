class ConfigError(ValueError):
    """Invalid configuration or mismatched dimensions."""


class UsageError(RuntimeError):
    """An API was called in a state it does not support."""


class NumericalError(FloatingPointError):
    """Non-finite values appeared during optimization or checking."""
