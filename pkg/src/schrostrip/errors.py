"""Exception hierarchy shared by all modules."""


class StripError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgument(StripError, ValueError):
    pass


class NumericError(StripError, ArithmeticError):
    pass


class DomainError(StripError, ValueError):
    """Evaluation requested outside the open time interval (-T, T)."""


class NotApplicable(StripError, ValueError):
    """The requested check or construction is not defined for the given input."""


class ConfigParseError(StripError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
