"""Exception types shared across the package."""


class SparseSepError(Exception):
    """Base class for package errors."""


class FormatError(SparseSepError):
    """Unsupported file format (channel count, bit depth, ...)."""


class DomainError(SparseSepError):
    """Operation precondition violated (shape mismatch, empty input, ...)."""


class UndefinedTargetError(DomainError):
    """SI-SNR requested against an all-zero reference signal."""


class DegenerateBatchError(SparseSepError):
    """Every item in a batch has zero weight; caller must resample or skip."""


class TrainingError(SparseSepError):
    """Non-recoverable numeric failure during training (NaN loss/grads)."""


class StateError(SparseSepError):
    """Operation requires state that is missing (e.g. no checkpoint loaded)."""
