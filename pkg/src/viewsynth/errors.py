"""Exception hierarchy shared across the package."""


class ViewSynthError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(ViewSynthError):
    """Operands have incompatible or malformed shapes."""


class InvalidArgumentError(ViewSynthError):
    """A value-level precondition was violated."""


class TapeError(ViewSynthError):
    """Backward pass requested on a missing or already-consumed graph."""


class InvalidBatchError(ViewSynthError):
    """Batch statistics requested on a batch that is too small."""


class ConfigError(ViewSynthError):
    """A configuration invariant does not hold."""


class UnknownClassError(ViewSynthError):
    """Requested object class is not defined."""


class InvalidCameraError(ViewSynthError):
    """Camera placement is degenerate (inside the object bound)."""


class InvalidCropError(ViewSynthError):
    """Crop region is empty or zero-area."""


class NoModelError(ViewSynthError):
    """No generator registered for the requested class."""


class EmptyClassError(ViewSynthError):
    """Dataset contains no usable instances for the requested class."""


class EmptyHoldoutError(ViewSynthError):
    """Evaluation requested but no held-out instances exist."""


class DivergenceError(ViewSynthError):
    """Training loss became non-finite."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class DatasetError(ViewSynthError):
    """Dataset directory or manifest is unusable."""


class CheckpointError(ViewSynthError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """File does not start with the expected magic bytes or has a bad layout."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the tensor table is complete."""


class CheckpointCorruptError(CheckpointError):
    """Payload does not match the stored checksum."""
