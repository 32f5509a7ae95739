"""Exception types shared across the package."""


class DannError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DannError, ValueError):
    pass


class InputError(DannError, ValueError):
    pass


class ConfigError(DannError, ValueError):
    pass


class StateError(DannError, RuntimeError):
    pass


class NumericError(DannError, ArithmeticError):
    pass


class CheckpointError(DannError, ValueError):
    pass


class TrainingError(DannError, RuntimeError):
    pass
