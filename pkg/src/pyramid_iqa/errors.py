"""Exception types raised across the package."""


class ShapeError(ValueError):
    """An array does not have the extents an operation requires."""


class StaleCacheError(RuntimeError):
    """A forward cache no longer matches the model it came from."""


class CheckpointError(Exception):
    """Base class for checkpoint read failures."""


class CheckpointVersionError(CheckpointError):
    """Bad magic bytes or an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended in the middle of a record."""


class CheckpointMismatchError(CheckpointError):
    """Stored tensors or config do not match the expected architecture."""


class ManifestError(ValueError):
    """A manifest file is malformed or references missing files."""


class ImageError(ValueError):
    """An image could not be read or has unusable dimensions."""


class UndefinedCorrelationError(ValueError):
    """A correlation was requested for a vector with zero variance."""
