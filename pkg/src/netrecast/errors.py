"""Exception hierarchy shared by every netrecast module."""


class RecastError(Exception):
    """Base class for all netrecast errors."""


class ShapeError(RecastError, ValueError):
    """Operand shapes are incompatible for an operation."""


class UsageError(RecastError, RuntimeError):
    """An API was called in a state where it is not meaningful."""


class DegenerateVarianceError(RecastError, ValueError):
    """Batch statistics requested over a single element."""


class SpecError(RecastError, ValueError):
    """A block, network, or architecture description is invalid."""


class PlanError(RecastError, ValueError):
    """A recasting plan does not fit the teacher it is applied to."""


class ConfigError(RecastError, ValueError):
    """Invalid run or optimizer configuration."""


class CheckpointFormatError(RecastError, ValueError):
    """Checkpoint bytes are not a readable netrecast file."""


class CheckpointVersionError(CheckpointFormatError):
    """Checkpoint was written by an incompatible format version."""


class CheckpointShapeError(CheckpointFormatError):
    """A stored tensor disagrees with the structure declared in the header."""


class DatasetFormatError(RecastError, ValueError):
    """Dataset file could not be decoded."""


class TruncatedRecordError(DatasetFormatError):
    """Dataset file ends inside a record."""


class LabelOverflowError(DatasetFormatError):
    """A decoded label is outside the declared class range."""
