class DFFTError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DFFTError, ValueError):
    pass


class ConfigError(DFFTError, ValueError):
    pass


class ShapeError(DFFTError, ValueError):
    pass


class CodingError(DFFTError, ValueError):
    pass


class TrainingDiverged(DFFTError, RuntimeError):
    pass
