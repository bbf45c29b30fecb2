"""Exception types shared across the package."""


class BPRError(Exception):
    """Base class for all package errors."""


class ShapeError(BPRError, ValueError):
    """Input dimensions do not match what a network or dataset expects."""


class NumericError(BPRError, ArithmeticError):
    """A loss, gradient or target became NaN/Inf.

    ``where`` names the op or parameter that produced the bad value.
    """

    def __init__(self, message: str, where: str | None = None):
        super().__init__(message if where is None else f"{message} (at {where})")
        self.where = where


class DatasetFormatError(BPRError, ValueError):
    """A binary dataset or checkpoint file is malformed."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(DatasetFormatError):
    pass


class ConfigError(BPRError, ValueError):
    """Invalid or incomplete run configuration."""
