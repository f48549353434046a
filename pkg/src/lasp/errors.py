"""Exception types shared across the package."""


class LaspError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LaspError, ValueError):
    """Array dimensions do not match what an operation expects."""

    def __init__(self, what, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class ConfigError(LaspError, ValueError):
    """Invalid or inconsistent configuration."""


class EmptySelectionError(LaspError, ValueError):
    """The mask selects no embedding dimensions; fall back to full-width
    relation distillation."""


class DegenerateInputError(LaspError, ValueError):
    """An input is degenerate (zero norm, empty set, all samples skipped)."""


class CapacityError(LaspError, ValueError):
    """Replay buffer capacity is too small for the number of classes."""


class DataFormatError(LaspError, ValueError):
    """A dataset file violates its declared format (magic, counts, rows)."""


class CheckpointError(LaspError, RuntimeError):
    """Base class for checkpoint read/write failures."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version is not supported."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint was written for a different model configuration."""


class CorruptFileError(CheckpointError):
    """Checkpoint file is truncated or has an invalid header."""
