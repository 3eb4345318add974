"""Exception types shared across the package."""


class QKSpaceError(Exception):
    """Base class for all package errors."""


class DimensionError(QKSpaceError, ValueError):
    pass


class NumericalError(QKSpaceError, ArithmeticError):
    pass


class ConfigError(QKSpaceError, ValueError):
    pass


class TrainingError(NumericalError):
    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class EmptyEvalSet(QKSpaceError, ValueError):
    pass


class EmptyEstimateError(QKSpaceError, ValueError):
    pass


class MergeError(QKSpaceError, ValueError):
    pass


class ZeroMatrixError(NumericalError):
    pass


class ProjectorError(QKSpaceError, ValueError):
    pass


class NotEnoughKeysError(QKSpaceError, ValueError):
    pass


class ParseError(QKSpaceError, ValueError):
    def __init__(self, message, line=None, field=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.field = field


class SchemaError(QKSpaceError, ValueError):
    pass
