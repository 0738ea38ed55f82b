"""Exception hierarchy shared by every module.

Each class carries a short ``category`` string used by the CLI to report a
diagnostic and pick an exit code.
"""


class ConvS2SError(Exception):
    category = "error"
    exit_code = 1


class ShapeError(ConvS2SError, ValueError):
    category = "shape"
    exit_code = 2


class NumericalError(ConvS2SError, FloatingPointError):
    category = "numerical"
    exit_code = 3


class NormStateError(ConvS2SError, RuntimeError):
    category = "norm-state"
    exit_code = 4


class ModeError(ConvS2SError, ValueError):
    category = "mode"
    exit_code = 5


class DataError(ConvS2SError, ValueError):
    category = "data"
    exit_code = 6


class ConfigError(ConvS2SError, ValueError):
    category = "config"
    exit_code = 7


class CheckpointError(ConvS2SError, RuntimeError):
    category = "checkpoint"
    exit_code = 8


class TrainingDiverged(ConvS2SError, RuntimeError):
    category = "divergence"
    exit_code = 9

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
