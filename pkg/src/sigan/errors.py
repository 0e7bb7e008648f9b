"""Exception types shared across the package."""


class SiganError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SiganError):
    """Invalid configuration value or combination."""


class DatasetLayoutError(SiganError):
    """Dataset directory layout does not match the documented structure."""


class ImageDecodeError(SiganError):
    """An image file could not be read or decoded."""

    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"cannot decode image {path!r}: {reason}")


class ShapeMismatchError(SiganError):
    """Tensor shape does not match what the operation expects."""

    def __init__(self, expected, actual, what: str = "input"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what} shape mismatch: expected {expected}, got {actual}")


class RoleMismatchError(SiganError):
    """A generator with the wrong translation direction was supplied."""


class AttentionBudgetError(SiganError):
    """Non-local attention requested over too many spatial positions."""


class NonFiniteLossError(SiganError):
    """A training loss became NaN/Inf; carries the offending batch ids."""

    def __init__(self, message: str, batch_ids_a=None, batch_ids_b=None):
        self.batch_ids_a = list(batch_ids_a or [])
        self.batch_ids_b = list(batch_ids_b or [])
        super().__init__(message)


class CheckpointError(SiganError):
    """Checkpoint directory is missing, incomplete, or inconsistent."""


class ExtractorError(SiganError):
    """Feature extractor misbehaved (dimension drift, unavailable weights...)."""
