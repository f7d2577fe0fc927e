"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see ``intermoco.cli``).
"""


class IntermocoError(Exception):
    """Base class for all package errors."""


class ConfigError(IntermocoError, ValueError):
    """Invalid configuration value or incompatible settings."""


class DimensionError(IntermocoError, ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NumericError(IntermocoError, ArithmeticError):
    """A computation produced or would produce non-finite values."""


class UsageError(IntermocoError, RuntimeError):
    """An API was called in a state where it is not defined."""


class DataError(IntermocoError, ValueError):
    """Dataset ingestion or validation failure."""


class UndefinedMetricError(IntermocoError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""
