"""Exception types shared across the package."""


class SplitJsccError(Exception):
    """Base class for all package errors."""


class DimensionError(SplitJsccError, ValueError):
    """Raised on incompatible shapes, channel counts or axes."""


class NumericError(SplitJsccError, ArithmeticError):
    """Raised when a computation produces NaN or Inf where finite values are required."""


class StateError(SplitJsccError, RuntimeError):
    """Raised when an object is used in a state that does not allow the operation."""


class ConfigError(SplitJsccError, ValueError):
    """Raised for invalid or inconsistent configuration."""


class ChecksumError(SplitJsccError, IOError):
    """Raised when a checkpoint block fails its CRC check."""
