class EmattnError(Exception):
    """
    Root of all errors raised by `emattn`. Every concrete error below also derives from the builtin exception
    that best describes it, so that callers can keep catching `ValueError` & co.
    """
    pass


class ShapeError(EmattnError, ValueError):
    """Raised when extents or element counts of tensors do not match an operation's contract."""
    pass


class AxisError(ShapeError):
    """Raised when an axis, or a list of axes, is not valid for the rank of a tensor."""
    pass


class ConfigError(EmattnError, ValueError):
    """Raised when a hyperparameter or a configuration mapping is invalid (divisibility, domains, unknown keys)."""
    pass


class TapeError(EmattnError, LookupError):
    """Raised when a differentiation tape is asked about a node it did not record."""
    pass


class NumericError(EmattnError, ArithmeticError):
    """Raised when a computation produces non-finite values where finite values are required."""
    pass


class GraphError(EmattnError, ValueError):
    """Raised when a symbolic model graph is not channel-consistent, or when spatial extents vanish."""
    pass


class FormatError(EmattnError, ValueError):
    """Raised when a binary file does not follow the expected layout."""
    pass
