"""Exception types shared across the toolkit."""


class WbmarkError(Exception):
    """Base class for all toolkit errors."""


class InputError(WbmarkError):
    """An argument violates an operation's preconditions."""


class IngestError(WbmarkError):
    """Dataset files are missing or corrupt."""


class CheckpointError(WbmarkError):
    """Checkpoint manifest and blob disagree, or values are not finite."""


class TrainingError(WbmarkError):
    """Training diverged (NaN loss); carries the epoch index."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class EmbeddingError(WbmarkError):
    """Watermark embedding did not converge; carries the final report."""

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}


class FittingError(WbmarkError):
    """EM fitting failed; carries the log-likelihood trace."""

    def __init__(self, message: str, loglik_trace: list[float] | None = None):
        super().__init__(message)
        self.loglik_trace = loglik_trace or []


class SelectionError(WbmarkError):
    """Trigger-set selection produced an empty or invalid subset."""
