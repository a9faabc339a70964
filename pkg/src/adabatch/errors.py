"""Exception types shared across the engine."""


class ShapeError(ValueError):
    """Operand shapes do not compose."""


class GeometryError(ValueError):
    """Convolution geometry does not divide evenly (input must be pre-padded)."""


class StateError(RuntimeError):
    """Layer used out of order, e.g. backward before forward."""


class DataFormatError(ValueError):
    """Binary dataset file violates its format."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt or has an unsupported version."""


class ConfigError(ValueError):
    """Run configuration is invalid; message names the offending field."""


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, iteration=None):
        super().__init__(message)
        self.epoch = epoch
        self.iteration = iteration
