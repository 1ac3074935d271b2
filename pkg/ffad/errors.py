"""
Exception types raised by ffad. The CLI maps each to a process exit code.
"""


class FFADError(Exception):
    """Base class for ffad errors."""

    exit_code = 1


class ConfigError(FFADError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(FFADError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class NumericError(FFADError, ArithmeticError):
    """Training or scoring produced a non-finite value."""

    exit_code = 4


class OutputExistsError(FFADError, FileExistsError):
    """A stage's outputs already exist and overwriting wasn't requested."""

    exit_code = 1
