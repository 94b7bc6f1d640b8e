from typing import Optional

# Note: UsageError and ConfigError are meant to be reported back to whoever
# invoked the lab (the CLI turns them into exit code 1). Everything else is a
# runtime failure.

class LabError(Exception):
    """
    Root of every error raised on purpose by this package.
    """
    pass

class DimensionError(LabError, ValueError):
    """
    Raised when tensor shapes do not line up for an operation. The message names both shapes.
    """
    pass

class UsageError(LabError):
    """
    Raised when an operation is called in a way its contract forbids, e.g. attention over an
    empty window, backward on a loss that was never recorded, or inspecting a checkpoint that
    has no transition projections.
    """
    pass

class SequencingError(LabError):
    """
    Raised when timesteps arrive out of order: a cache push that skips a step, or decoder and
    encoder windows of different lengths.
    """
    pass

class ConfigError(LabError, ValueError):
    """
    Raised for configuration values outside their allowed range and for unparsable config files.
    """
    def __init__(self, message: str, field: Optional[str] = None,
                 bound: Optional[str] = None, line: Optional[int] = None) -> None:
        super().__init__(message)
        self.field = field
        self.bound = bound
        self.line = line

class CheckpointError(LabError):
    """
    Base class for checkpoint loading failures.
    """
    pass

class CheckpointHeaderError(CheckpointError):
    """
    The header is missing, is not valid JSON, or lacks required entries.
    """
    pass

class CheckpointTruncatedError(CheckpointError):
    """
    The payload ends before the array named in the message was fully read.
    """
    def __init__(self, message: str, array_name: str) -> None:
        super().__init__(message)
        self.array_name = array_name

class CheckpointVersionError(CheckpointError):
    """
    The checkpoint was written with a format_version this code does not understand.
    """
    pass

class DatasetError(LabError):
    """
    Raised when a dataset file cannot be written or read back. The message names the file.
    """
    pass

class DivergenceError(LabError):
    """
    Raised when the training loss stops being finite.
    """
    def __init__(self, epoch: int, batch: int, loss: float) -> None:
        super().__init__(f"Training diverged at epoch {epoch}, batch {batch}: loss = {loss}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
