"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class AdapterError(Exception):
    exit_code = 1


class ConfigError(AdapterError):
    exit_code = 1


class ShapeError(AdapterError, ValueError):
    exit_code = 1


class StateError(AdapterError):
    exit_code = 1


class PreconditionError(AdapterError, ValueError):
    exit_code = 1


class GeometryError(AdapterError, ValueError):
    exit_code = 2


class TokenizationError(AdapterError, ValueError):
    exit_code = 2


class DataError(AdapterError, IOError):
    exit_code = 2


class CheckpointError(AdapterError):
    exit_code = 2


class MetricsError(AdapterError):
    exit_code = 2


class NumericError(AdapterError, ArithmeticError):
    exit_code = 3
