"""Exception types shared across the pipeline."""

from __future__ import annotations


class ConvoForgeError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(ConvoForgeError):
    """Fatal configuration problem (bad config file, empty corpus, ...)."""


class RetrievalError(ConvoForgeError):
    """Embedding backend or vector index failure."""


class UndefinedSimilarityError(RetrievalError):
    """Centroid similarity is undefined (zero-norm mean vector)."""


class GatewayError(ConvoForgeError):
    """Text-generation backend failed after exhausting retries."""


class TemplateError(ConvoForgeError):
    """Prompt template missing, or bindings do not match its placeholders."""


class StageError(ConvoForgeError):
    """A pipeline stage cannot run (missing upstream artifact, bad ordering)."""


class StatsError(ConvoForgeError):
    """Dataset statistics cannot be computed (e.g. empty records file)."""
