"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps the three top-level families onto exit codes
(config 2, data 3, numeric 4).
"""


class ArgenError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(ArgenError):
    exit_code = 2


class DataError(ArgenError):
    exit_code = 3


class TaggingError(DataError):
    """Raised when phrase chunking is asked to run without POS tags."""


class NumericError(ArgenError, ArithmeticError):
    exit_code = 4


class DimensionError(NumericError, ValueError):
    """Shape mismatch between operands."""


class GradCheckRefused(NumericError):
    """The function under check is not deterministic (e.g. live dropout)."""
