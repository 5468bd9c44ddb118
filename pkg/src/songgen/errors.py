"""Exception hierarchy shared across the pipeline."""


class SonggenError(Exception):
    """Base class for all pipeline errors."""


class InvalidInput(SonggenError):
    """Malformed or empty input where a valid value is required."""


class RangeError(SonggenError):
    """A pitch or index left its allowed range."""


class DegenerateProfile(SonggenError):
    """Pitch-class profile has zero variance; Pearson correlation undefined."""


class ClipTooLong(SonggenError):
    """Clip exceeds the maximum token length."""


class MalformedSequence(SonggenError):
    """Token sequence violates a structural constraint (e.g. offsets not increasing)."""


class AlignmentError(SonggenError):
    """Condition and target lengths disagree."""


class CodecMismatch(SonggenError):
    """Token file refers to a different codebook than the one supplied."""


class InsufficientData(SonggenError):
    """Not enough samples to fit the requested model."""


class DependencyError(SonggenError):
    """A required upstream artifact (checkpoint, codebook) is missing."""


class EmptyGeneration(SonggenError):
    """The model emitted an end token immediately; nothing was generated."""


class ConfigError(SonggenError):
    """Bad or inconsistent run configuration."""


class GenerationError(SonggenError):
    """A generation stage failed; carries the stage tag."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
