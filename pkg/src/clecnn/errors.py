"""Exception hierarchy shared by every module.

Each family carries the process exit code the CLI uses for it.
"""


class CleError(Exception):
    exit_code = 1


class ConfigError(CleError, ValueError):
    exit_code = 2


class DataError(CleError, ValueError):
    exit_code = 3


class DivergenceError(CleError, FloatingPointError):
    exit_code = 4

    def __init__(self, layer, iteration, message=None):
        self.layer = layer
        self.iteration = iteration
        super().__init__(message or f"non-finite gradient in layer {layer!r} at iteration {iteration}")


class ShapeError(ConfigError):
    """Tensor or layer shapes do not chain."""


class DonorMismatchError(ConfigError):
    def __init__(self, layers, message=None):
        self.layers = list(layers)
        super().__init__(message or f"donor checkpoint does not match layers: {', '.join(self.layers)}")


class CheckpointFormatError(DataError):
    """Malformed checkpoint file (bad magic, version or truncated payload)."""


class AlignmentError(DataError):
    """Image id sets of two label/score collections differ."""
