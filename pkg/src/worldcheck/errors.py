"""Exception hierarchy shared across the package."""
from __future__ import annotations


class WorldcheckError(Exception):
    """Base class for every error raised by this package."""


class CatalogError(WorldcheckError):
    """Malformed catalog file, taxonomy violation, or bad sampling request."""


class GatewayError(WorldcheckError):
    """Base class for model-endpoint failures."""


class TransportError(GatewayError):
    """Network or HTTP failure after exhausting retries."""

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class SchemaViolationError(GatewayError):
    """Model reply never validated against the expected schema.

    Keeps the last raw reply so failures can be audited.
    """

    def __init__(self, message: str, raw_text: str | None = None, attempts: int = 0):
        super().__init__(message)
        self.raw_text = raw_text
        self.attempts = attempts


class PayloadTooLargeError(GatewayError):
    """Attached image exceeds the request size limit."""


class ScriptExhaustedError(GatewayError):
    """Mock backend received a request its script has no response for."""


class StageError(WorldcheckError):
    """A pipeline stage produced unusable output."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


class ImageError(WorldcheckError):
    """Image bytes could not be decoded or resolved."""


class RunConfigError(WorldcheckError):
    """Run directory belongs to a different configuration than requested."""


class AnalyticsError(WorldcheckError):
    """Inconsistent inputs to a report computation."""
