"""Custom exception classes for specific error handling."""

from typing import Optional, Dict, Any


class ReplicaError(Exception):
    """Base exception for the replica-lab pipeline."""

    exit_code: int = 1

    def __init__(self, message: str, error_code: Optional[str] = None, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.error_code = error_code
        self.details = details or {}


class ConfigError(ReplicaError):
    """Base class for configuration errors."""
    exit_code = 2


class ConfigValidationError(ConfigError):
    """Raised when a config section fails schema validation."""
    pass


class DataIOError(ReplicaError):
    """Base class for file and artifact errors."""
    exit_code = 3


class PGMFormatError(DataIOError):
    """Raised when a file is not a 16-bit binary PGM."""
    pass


class ManifestError(DataIOError):
    """Raised when a dataset manifest is missing or inconsistent."""
    pass


class CheckpointFormatError(DataIOError):
    """Raised when a weight checkpoint cannot be decoded."""
    pass


class ConvergenceError(ReplicaError):
    """Raised when overfit training stops before reaching its loss threshold."""
    exit_code = 4


class AcceptanceError(ReplicaError):
    """Raised when a gradient check exceeds its tolerance."""
    exit_code = 5


class ShapeError(ReplicaError, ValueError):
    """Raised on dimension mismatch or divisibility violations."""
    pass


class NonFiniteError(ReplicaError, FloatingPointError):
    """Raised by the finite-value debug assertion."""
    pass


class MissingGradientError(ReplicaError):
    """Raised when an optimizer step finds a parameter without a gradient."""
    pass


class TranslationError(ReplicaError):
    """Base class for local image translation errors."""
    pass


class EmptyForegroundError(TranslationError):
    """Raised when an image has no foreground above the automatic threshold."""
    pass


class NoPairError(TranslationError):
    """Raised when no normal image overlaps a tumor bounding box."""
    pass


class EmptyDatasetError(ReplicaError):
    """Raised when training is requested on an empty dataset."""
    pass
