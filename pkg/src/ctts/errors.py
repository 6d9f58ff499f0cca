"""Exception types shared across the toolkit.

Plain I/O failures (missing files, unreadable WAVs) surface as the builtin
OSError family; everything the toolkit itself diagnoses derives from
CttsError so callers can catch one base class.
"""


class CttsError(Exception):
    """Base class for all toolkit-diagnosed errors."""


class ConfigError(CttsError):
    """A configuration value, template, or shape contract is invalid."""


class ValidationError(CttsError):
    """Input data violates a documented precondition or invariant."""


class ManifestParseError(ValidationError):
    """A manifest line could not be parsed."""

    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


class MelFormatError(CttsError):
    """A mel binary file has a bad magic, header, or payload size."""


class CheckpointError(CttsError):
    """A checkpoint failed to load: version, digest, or asset mismatch."""


class VocoderError(CttsError):
    """An external vocoder backend failed or produced no usable output."""


class TranscriptionError(CttsError):
    """An ASR invocation failed."""


class DecodeLimitError(CttsError):
    """Free-running decoding exceeded the configured step limit."""
