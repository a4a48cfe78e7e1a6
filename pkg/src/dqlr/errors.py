"""Exception hierarchy shared by every dqlr module."""


class DQLRError(Exception):
    """Base class for all dqlr errors."""


class DimensionError(DQLRError, ValueError):
    """Tensor or image shapes are incompatible with an operation."""


class NumericError(DQLRError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class GraphError(DQLRError, RuntimeError):
    """Backward was requested on something that is not a valid scalar graph."""


class FormatError(DQLRError, ValueError):
    """Input data on disk does not match the expected format."""


class ConfigError(DQLRError, ValueError):
    """Unknown or invalid configuration key/value."""


class CheckpointError(FormatError):
    """Base class for checkpoint decoding failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    def __init__(self, message: str, tensor_name: str | None = None):
        super().__init__(message)
        self.tensor_name = tensor_name
