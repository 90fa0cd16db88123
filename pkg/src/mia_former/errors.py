"""Exception hierarchy for MIA-Former.

Every error raised on purpose by this package derives from MIAFormerError and
from the builtin it refines, so callers can catch either.
"""


class MIAFormerError(Exception):
    """Base class for all package errors."""


class ConfigError(MIAFormerError, ValueError):
    """A configuration field violates an invariant.

    Attributes:
        field: Name of the offending field (dotted for nested models)
    """

    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__(f"{field}: {message}")


class MaskError(MIAFormerError, ValueError):
    """A mask has the wrong shape or is not binary where it must be."""


class TraceError(MIAFormerError, ValueError):
    """A policy trace is empty, incomplete, or inconsistent with the config."""


class DatasetError(MIAFormerError, ValueError):
    """A dataset source is missing, malformed, or contains a bad sample."""


class CheckpointError(MIAFormerError, OSError):
    """A checkpoint directory is missing or does not match the config."""


class StageError(MIAFormerError, RuntimeError):
    """A training stage was requested without its prerequisites."""


class TrainingDivergedError(MIAFormerError, RuntimeError):
    """A loss became non-finite during training."""


class AttackError(MIAFormerError, RuntimeError):
    """An adversarial attack produced non-finite gradients."""


class RunLockedError(MIAFormerError, RuntimeError):
    """Another process is writing to the same output directory."""
