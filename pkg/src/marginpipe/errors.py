"""Exception hierarchy shared across the pipeline.

CLI exit-code mapping: usage errors exit 1, anything deriving from
MarginPipeError exits 2, except BackendError and subclasses which exit 3.
"""


class MarginPipeError(Exception):
    """Base class for all pipeline errors."""


class ContractError(MarginPipeError):
    """An operation was called with arguments violating its preconditions."""


class ShapeError(ContractError):
    """Tensor shapes are inconsistent with the operation's contract."""


class ConfigError(MarginPipeError):
    """Invalid or inconsistent configuration."""


class DataError(MarginPipeError):
    """Dataset, manifest, or file-content problem."""


class ExtractionError(DataError):
    """Patch extraction cannot proceed (e.g. image smaller than patch)."""


class GenerationError(DataError):
    """Phantom generation failed (e.g. infeasible geometry)."""


class TrainingError(MarginPipeError):
    """Training cannot proceed (e.g. single-class dataset)."""


class NumericsError(MarginPipeError):
    """Non-finite values detected where finiteness is required."""


class EmptyMaskError(MarginPipeError):
    """A mask with at least one positive pixel was required."""


class UndefinedMetricError(MarginPipeError):
    """The requested metric is undefined for these inputs."""


class CheckpointError(MarginPipeError):
    """Base class for checkpoint serialization errors."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint ended before all declared content was read."""


class BackendError(MarginPipeError):
    """Base class for refinement-backend failures (CLI exit code 3)."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class BackendUnavailableError(BackendError):
    """Remote backend is unreachable or failed its health check."""


class BackendTimeoutError(BackendError):
    """Remote backend did not answer within the configured timeout."""


class RemoteProtocolError(BackendError):
    """Remote backend answered, but outside the wire contract."""
