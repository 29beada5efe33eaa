"""Exception types shared across the codec."""


class HflicError(Exception):
    """Base class for all codec errors."""


class ConfigurationError(HflicError):
    """Invalid configuration, shape, or channel mismatch."""


class ValidationError(HflicError):
    """Invalid runtime input (non-finite tensors, bad ranges)."""


class DetectionsError(HflicError):
    """Malformed or inconsistent face-detection input."""


class DecodeError(HflicError):
    """Entropy decoding failed (truncated or corrupt stream)."""


class BitstreamError(HflicError):
    """Container-level failure.

    ``groups_decoded`` reports how many latent channel groups were fully
    recovered before the failure, so callers can report partial decodes.
    """

    def __init__(self, message: str, groups_decoded: int = 0):
        super().__init__(message)
        self.groups_decoded = groups_decoded


class HeaderMismatchError(BitstreamError):
    """Stream header (magic, version, or model id) does not match the decoder."""


class TrainingDivergenceError(HflicError):
    """A loss term became non-finite; carries the offending term name."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite training loss term {term!r}: {value}")
        self.term = term
        self.value = value
