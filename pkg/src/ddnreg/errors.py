"""Exception types shared across the package."""


class FormatError(ValueError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ConfigError(ValueError):
    """Invalid or incompatible configuration."""


class NumericError(ArithmeticError):
    """NaN or Inf appeared where finite values are required."""


class UndefinedMetricError(ValueError):
    """A metric has no defined value for the given input (e.g. zero variance)."""
