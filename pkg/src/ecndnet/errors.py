"""Exception hierarchy shared by every ecndnet module."""


class ECNDNetError(Exception):
    """Base class for all library errors."""


class ShapeError(ECNDNetError, ValueError):
    pass


class ConfigError(ECNDNetError, ValueError):
    pass


class StateError(ECNDNetError, RuntimeError):
    """A cache or optimizer state does not match the parameters it is used with."""


class DegenerateBatchError(ECNDNetError, ValueError):
    pass


class TrainingDivergedError(ECNDNetError, ArithmeticError):
    pass


class DataError(ECNDNetError):
    """Missing, empty or undecodable input data."""


class CheckpointFormatError(ECNDNetError):
    pass


class BadMagicError(CheckpointFormatError):
    pass


class UnsupportedVersionError(CheckpointFormatError):
    pass


class TruncatedCheckpointError(CheckpointFormatError):
    pass


class ChecksumMismatchError(CheckpointFormatError):
    pass
