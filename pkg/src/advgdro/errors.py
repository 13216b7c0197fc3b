"""Exception hierarchy shared by every module."""


class AdvGDROError(Exception):
    """Base class for all library errors."""


class DimensionError(AdvGDROError, ValueError):
    pass


class ParameterError(AdvGDROError, ValueError):
    pass


class DataError(AdvGDROError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(AdvGDROError, ArithmeticError):
    pass


class UnsupportedOperation(AdvGDROError, NotImplementedError):
    pass


class EvaluationError(AdvGDROError, ValueError):
    pass


class ConfigError(AdvGDROError, ValueError):
    pass


class ComparisonError(AdvGDROError, ValueError):
    pass
