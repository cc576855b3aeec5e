CHECKPOINT_MAGIC = b"GRIDOOD1"
CHECKPOINT_VERSION = 1

STRIDES = (32, 16, 8)

ID_SHAPES = ("circle", "square", "triangle", "plus")
OOD_SHAPES = ("ring", "star", "cross", "crescent")

SPLITS = ("train", "val", "test_id", "test_ood")


class GridOODException(Exception):
    ...


class DimensionError(GridOODException):
    ...


class DomainError(GridOODException):
    ...


class NonFiniteError(GridOODException):
    ...


class GraphUsageError(GridOODException):
    ...


class UsageError(GridOODException):
    ...


class ConfigError(GridOODException):
    ...


class CheckpointError(GridOODException):
    ...


class CheckpointFormatError(CheckpointError):
    ...


class CheckpointVersionError(CheckpointError):
    ...


class TruncatedContainerError(CheckpointError):
    ...


class CheckpointShapeError(CheckpointError):
    ...


class TrainingDivergedError(GridOODException):
    """Raised when the loss stops being finite; carries the last good checkpoint."""

    def __init__(self, message: str, last_good=None) -> None:
        super().__init__(message)
        self.last_good = last_good
