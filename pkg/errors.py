"""
Error hierarchy shared by every module.

Library code raises these; only the command-line entry point turns them
into process exit codes.
"""


class EvqError(Exception):
    """Base class for all errors raised by the package"""
    exit_code = 1


class InternalError(EvqError):
    """Broken internal invariant (accumulator bound, timeline dependency)"""
    exit_code = 1


class ShapeError(EvqError, ValueError):
    """Tensor or layer shapes that do not fit together"""
    exit_code = 2


class ConfigError(EvqError):
    """Malformed or inconsistent configuration document"""
    exit_code = 2

    def __init__(self, message: str, line: int = None, column: int = None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class CalibrationError(EvqError):
    """Calibration source missing or statistics incomplete"""
    exit_code = 3


class QuantArtifactError(EvqError):
    """Quantization parameters missing, unreadable or invalid"""
    exit_code = 4


class SimulationError(EvqError):
    """Layer cannot be mapped onto the accelerator"""
    exit_code = 5

    def __init__(self, message: str, layer: str = None):
        if layer is not None:
            message = f"{layer}: {message}"
        super().__init__(message)
        self.layer = layer


class InvalidValueError(EvqError, ValueError):
    """Argument outside the domain of an operation (non-positive scale, NaN)"""
    exit_code = 2


class FormatError(EvqError):
    """Binary tensor file that does not follow the TQT1 layout"""
    exit_code = 2
