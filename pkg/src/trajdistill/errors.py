"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An operation received arguments that violate its preconditions."""


class ParseError(ValueError):
    """A data file could not be parsed; carries the offending row/line."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)
        self.row = row


class NumericalError(ArithmeticError):
    """A loss or metric became non-finite."""


class ConfigMismatchError(ValueError):
    """A checkpoint's stored configuration conflicts with the requested one."""


class EmptySplitError(ValueError):
    """An evaluation split contains no windows."""
