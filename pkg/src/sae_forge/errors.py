class SaeForgeError(Exception):
    """Base class for all package errors."""


class ConfigError(SaeForgeError, ValueError):
    pass


class DimensionError(SaeForgeError, ValueError):
    pass


class NumericError(SaeForgeError, ArithmeticError):
    pass


class DataExhaustedError(SaeForgeError):
    pass


class FormatError(SaeForgeError):
    """Malformed checkpoint or dump file."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class HeaderMismatchError(FormatError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
