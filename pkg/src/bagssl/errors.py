"""Failure classes shared across modules; the CLI maps them to exit codes."""


class DataError(Exception):
    """Malformed or unreadable dataset content (exit code 2)."""


class ConfigError(Exception):
    """Invalid run configuration or unknown keys (exit code 1)."""


class NumericalError(Exception):
    """Non-finite values or diverging optimization (exit code 3)."""
