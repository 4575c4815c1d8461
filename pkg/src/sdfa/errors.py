"""Exception hierarchy shared by every stage of the pipeline."""


class SdfaError(Exception):
    """Base class. ``kind`` is the machine-readable tag the CLI prints."""

    kind = "error"


class ParseError(SdfaError):
    kind = "parse"

    def __init__(self, message: str, frame_index: int | None = None):
        if frame_index is not None:
            message = f"frame {frame_index}: {message}"
        super().__init__(message)
        self.frame_index = frame_index


class StructuralError(ParseError):
    kind = "structure"


class EmptySequenceError(SdfaError):
    kind = "empty_sequence"


class SequenceTooShortError(SdfaError):
    kind = "sequence_too_short"


class ConfigError(SdfaError):
    kind = "config"


class ShapeError(SdfaError):
    kind = "shape"


class BatchError(SdfaError):
    kind = "batch"


class DataError(SdfaError):
    kind = "data"


class SplitError(SdfaError):
    kind = "split"


class TrainingError(SdfaError):
    kind = "training"


class UndefinedAUCError(DataError):
    kind = "undefined_auc"


class UsageError(SdfaError):
    kind = "usage"


class CheckpointError(SdfaError):
    kind = "checkpoint"
