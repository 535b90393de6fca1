"""Exception hierarchy shared across the engine.

The CLI maps these onto its exit-code taxonomy: user/data problems
(`ValidationError`, `ConfigError`) exit 1, runtime failures
(`GatewayError` and friends) exit 2.
"""

from __future__ import annotations


class MedcorrError(Exception):
    """Base class for all engine errors."""


class ValidationError(MedcorrError):
    """Invalid user-supplied data: malformed files, broken invariants."""


class ConfigError(MedcorrError):
    """Invalid configuration file or overrides."""


class GatewayError(MedcorrError):
    """Completion backend failure."""


class CacheMissError(GatewayError):
    """Replay backend has no entry for a request.

    Carries the canonical cache key so fixture drift is diagnosable.
    """

    def __init__(self, key: str):
        super().__init__(f"replay cache miss for key {key}")
        self.key = key


class LiveRequestError(GatewayError):
    """Live HTTP backend failed after retries."""

    def __init__(self, message: str, status: int | None = None, body_excerpt: str = ""):
        super().__init__(message)
        self.status = status
        self.body_excerpt = body_excerpt


class CompletionParseError(MedcorrError):
    """A completion could not be parsed into the expected output fields."""

    def __init__(self, message: str, missing_fields: tuple[str, ...] = (), raw_text: str = "", attempts: int = 1):
        super().__init__(message)
        self.missing_fields = missing_fields
        self.raw_text = raw_text
        self.attempts = attempts


class PipelineStageError(MedcorrError):
    """A pipeline stage produced an unusable value (e.g. out-of-range line id)."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage
