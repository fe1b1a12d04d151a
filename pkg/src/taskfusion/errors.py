"""Exception hierarchy shared by every module.

The CLI maps these to exit codes: ``DataError`` -> 1, ``ConfigError`` and
``UsageError`` -> 2, ``NumericError`` -> 3.
"""


class FusionError(Exception):
    """Base class for all package errors."""


class ConfigError(FusionError, ValueError):
    """Invalid configuration, hyper-parameter or tensor shape."""


class ShapeError(ConfigError):
    pass


class UsageError(FusionError, ValueError):
    """API called outside its contract (non-scalar loss, empty image, ...)."""


class DataError(FusionError):
    """Malformed or inconsistent input data."""


class PGMFormatError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class LabelRangeError(DataError):
    pass


class NumericError(FusionError, ArithmeticError):
    """A non-finite value appeared in a forward value, loss or gradient."""
