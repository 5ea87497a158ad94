"""Exception types shared across the package."""


class NayerError(Exception):
    """Base class for all errors raised by this package."""


class TemplateError(NayerError):
    """Prompt template does not contain exactly one supported placeholder."""


class EmbeddingIngestError(NayerError):
    """Embedding CSV is malformed (duplicate ids, ragged rows, non-finite values)."""


class EmbeddingLookupError(NayerError):
    """A requested class id is outside the pool's 0..K-1 range."""


class ModeMismatchError(NayerError):
    """Latent input mode and supplied arguments do not agree."""


class DegenerateBatchError(NayerError):
    """Batch statistics requested on a batch too small to define a variance."""


class ShapeError(NayerError):
    """Tensor shape incompatible with the consuming component."""


class NonFiniteLossError(NayerError):
    """A loss term became NaN or infinite; the run was aborted."""


class EmptyMemoryError(NayerError):
    """Sampling requested from an empty replay memory."""


class ConfigError(NayerError):
    """Run configuration is invalid or contains unknown keys."""


class ArchiveError(NayerError):
    """Parameter archive is missing, corrupt, or has a mismatched format version."""


class DatasetError(NayerError):
    """Dataset unavailable locally and could not be fetched."""
