"""Exception hierarchy shared across the package.

The CLI maps these onto distinct process exit codes, so raising the
specific class matters more than the message text.
"""


class AdaptKitError(Exception):
    """Base class for all package errors."""


class ArgumentError(AdaptKitError, ValueError):
    """A caller passed an out-of-contract value (empty bank, bad k, ...)."""


class ConfigurationError(AdaptKitError):
    """Shapes or config fields are inconsistent with each other."""


class BackendError(AdaptKitError):
    """A backbone backend is unknown or cannot be loaded."""


class DataError(AdaptKitError):
    """Dataset files are missing, unreadable, or misaligned."""


class ProtocolError(AdaptKitError):
    """The requested run violates the train/eval protocol (e.g. too few normals)."""


class CheckpointError(AdaptKitError):
    """A checkpoint file is missing required contents or is corrupt."""


class MetricUndefinedError(AdaptKitError, ValueError):
    """A ranking metric was requested on degenerate labels."""


class TrainingDivergedError(AdaptKitError):
    """Training produced a non-finite loss; message carries step and branch."""
