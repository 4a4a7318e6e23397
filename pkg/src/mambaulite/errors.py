"""Exception hierarchy shared across the package."""


class MambaULiteError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MambaULiteError, ValueError):
    """Tensor shapes do not agree with what an operation requires."""


class ConfigurationError(MambaULiteError, ValueError):
    """A block or model was configured with unsupported hyperparameters."""


class DegenerateInputError(MambaULiteError, ValueError):
    """Input has an empty axis where a reduction needs at least one element."""


class LifecycleError(MambaULiteError, RuntimeError):
    """A gradient tape was used after it had already been consumed."""


class ContractError(MambaULiteError, ValueError):
    """Caller violated a documented precondition."""


class ShapePlanError(DimensionError):
    """A forward pass produced a stage shape that differs from the plan."""

    def __init__(self, stage: str, expected, actual):
        self.stage = stage
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"stage {stage!r}: expected shape {self.expected}, got {self.actual}")


class CheckpointError(MambaULiteError):
    """Base class for checkpoint failures."""


class CorruptionError(CheckpointError):
    """Checkpoint bytes are truncated or fail checksum validation."""


class VersionError(CheckpointError):
    """Checkpoint format version is not understood by this reader."""


class IntegrityError(CheckpointError):
    """Checkpoint tensors do not match the architecture described by its config."""


class IngestionError(MambaULiteError, IOError):
    """An image or mask file could not be decoded."""


class DivergenceError(MambaULiteError, FloatingPointError):
    """Training produced a non-finite loss."""
