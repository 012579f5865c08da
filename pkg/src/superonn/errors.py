"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor extents do not line up for the requested operation."""


class ParameterError(ValueError):
    """A scalar argument or a model name is outside its valid domain."""


class CheckpointError(Exception):
    """Base class for checkpoint decoding failures."""


class CheckpointFormatError(CheckpointError):
    """Magic bytes or header fields are not what the reader expects."""


class CheckpointVersionError(CheckpointError):
    """The file declares a format version this reader does not understand."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended before all declared entries were read."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}; "
            "try a lower learning rate or smaller Q"
        )
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
