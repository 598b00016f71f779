"""Exception types shared across the pipeline."""


class VistaError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(VistaError):
    """Invalid or inconsistent configuration."""


class UsageError(VistaError):
    """An operation was called in a way its contract forbids."""


class PermutationError(UsageError):
    """A render order is not a permutation of the prompt's roles."""


class BackendError(VistaError):
    """A model backend failed; carries a diagnostic message."""


class ContextError(BackendError):
    """Requested sequence does not fit the backend context window."""


class LayerError(BackendError):
    """Requested layer index is out of range."""


class CapabilityError(BackendError):
    """The backend does not support the requested capability."""


class ProtocolError(BackendError):
    """Malformed wire-protocol traffic from an out-of-process backend."""


class TrainError(VistaError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message: str, batch_id: int | None = None):
        super().__init__(message)
        self.batch_id = batch_id


class IoError(VistaError):
    """Artifact read/write failure."""
