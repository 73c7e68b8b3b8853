"""Exception hierarchy shared across the package."""


class MMARDError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MMARDError, ValueError):
    pass


class NumericError(MMARDError, ArithmeticError):
    """A NaN or Inf showed up where only finite values are allowed."""


class GraphError(MMARDError, RuntimeError):
    pass


class CheckpointError(MMARDError, IOError):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class DatasetError(MMARDError, IOError):
    pass


class NotADatasetError(DatasetError):
    pass


class CorruptDatasetError(DatasetError):
    pass


class DatasetLabelError(DatasetError):
    pass


class ConfigError(MMARDError, ValueError):
    """Bad configuration; ``key`` names the offending entry when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
