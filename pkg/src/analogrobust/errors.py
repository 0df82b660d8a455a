"""Exception hierarchy shared by every subsystem."""


class AnalogRobustError(Exception):
    """Base class for all package errors."""


class DimensionError(AnalogRobustError, ValueError):
    pass


class UsageError(AnalogRobustError, RuntimeError):
    pass


class ArgumentError(AnalogRobustError, ValueError):
    pass


class IngestionError(AnalogRobustError, IOError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StateError(AnalogRobustError, RuntimeError):
    pass


class DeploymentError(AnalogRobustError, RuntimeError):
    pass


class TrainingError(AnalogRobustError, RuntimeError):
    pass


class NumericalError(AnalogRobustError, ArithmeticError):
    def __init__(self, message, condition=None):
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)
        self.condition = condition


class UndefinedMetricError(AnalogRobustError, ZeroDivisionError):
    pass


class CalibrationError(AnalogRobustError, RuntimeError):
    pass


class StudyError(AnalogRobustError, RuntimeError):
    pass


class ConfigError(AnalogRobustError, ValueError):
    def __init__(self, message, key=None):
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class DependencyError(AnalogRobustError, RuntimeError):
    def __init__(self, message, producer=None):
        if producer is not None:
            message = f"{message}; run `{producer}` first"
        super().__init__(message)
        self.producer = producer
