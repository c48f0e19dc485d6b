"""Exception types shared across the package."""


class DevoError(Exception):
    """Base class for all package errors."""


class ParameterError(DevoError, ValueError):
    pass


class InputOrderError(DevoError, ValueError):
    """An event is newer than the time a map is queried at."""


class BehindCameraError(DevoError, ValueError):
    pass


class DepthError(DevoError, ValueError):
    pass


class CalibrationError(DevoError, ValueError):
    pass


class ParseError(DevoError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class DatasetError(DevoError):
    pass


class ConfigError(DevoError, ValueError):
    pass


class DegenerateProblemError(DevoError):
    """No map point projects into the current view."""


class TrackingLost(DevoError):
    def __init__(self, message, t_us=None):
        self.t_us = t_us
        super().__init__(message)


class AssociationError(DevoError):
    pass


class AlignmentError(DevoError):
    pass


class EvaluationError(DevoError):
    pass
