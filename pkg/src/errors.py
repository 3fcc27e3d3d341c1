from __future__ import annotations


class FusionLmError(Exception):
    """Base class for every error raised by this package."""


class ArgumentError(FusionLmError, ValueError):
    pass


class DimensionError(ArgumentError):
    pass


class ConfigurationError(FusionLmError, ValueError):
    pass


class NumericError(FusionLmError, ArithmeticError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class CheckpointError(FusionLmError, OSError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, tensor_name: str, expected, found):
        super().__init__(
            f"tensor {tensor_name!r} has shape {tuple(found)}, config implies {tuple(expected)}"
        )
        self.tensor_name = tensor_name


class CorruptCheckpointError(CheckpointError):
    pass


class OracleTooLargeError(ArgumentError):
    def __init__(self, size_estimate: int, limit: int):
        super().__init__(
            f"exhaustive search would enumerate ~{size_estimate} sequences (limit {limit})"
        )
        self.size_estimate = size_estimate
        self.limit = limit


class UsageError(FusionLmError):
    pass
