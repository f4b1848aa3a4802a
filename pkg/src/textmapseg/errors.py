"""Exception hierarchy shared by all modules."""


class TextMapSegError(Exception):
    """Base class for every error raised by this package."""


class DataError(TextMapSegError, ValueError):
    """Malformed or inconsistent input data (files, masks, configs)."""


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class FormatError(DataError):
    """Binary file with bad magic, version or truncated payload."""


class NumericError(TextMapSegError, FloatingPointError):
    """Non-finite values during training or numerical routines."""
