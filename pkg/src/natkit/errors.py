"""Exception types mapped to CLI exit codes."""


class ConfigError(Exception):
    """Bad configuration or usage. Exit code 2."""


class DataError(Exception):
    """Malformed or inconsistent input data. Exit code 3."""


class NumericError(Exception):
    """Non-finite values or numerically invalid state. Exit code 4."""
