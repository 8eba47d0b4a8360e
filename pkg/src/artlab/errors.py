"""Typed errors shared across the package."""


class ArtlabError(Exception):
    """Base class for all artlab errors."""


class ConfigError(ArtlabError):
    """Invalid or missing configuration / manifest."""


class ShapeMismatchError(ArtlabError):
    """Tensor shape does not match what the component was configured for."""


class TimestepRangeError(ArtlabError):
    """Diffusion timestep outside [0, T]."""


class DivergenceError(ArtlabError):
    """Training loss became non-finite."""

    def __init__(self, message: str, batch_ids=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids) if batch_ids is not None else []


class IncompatibleAdapterError(ArtlabError):
    """Adapter placement does not resolve against the base model."""


class EmbedderError(ArtlabError):
    """A feature embedder failed to produce features."""


class UnindexedCorpusError(ArtlabError):
    """Attribution was queried against a corpus with no feature index."""
