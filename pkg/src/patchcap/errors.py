"""Exception taxonomy shared across the package."""

from __future__ import annotations


class PatchCapError(Exception):
    """Base class for all package-specific errors."""


class EmptyInputError(PatchCapError, ValueError):
    """An operation that requires a nonempty input received an empty one."""


class DegenerateImageError(PatchCapError, ValueError):
    """Image too small to divide into quadrants (needs width and height >= 2)."""


class DecodeError(PatchCapError, ValueError):
    """Input bytes could not be decoded as a supported image format."""


class OutOfBoundsError(PatchCapError, ValueError):
    """A box reaches outside the image extent."""


class BackendError(PatchCapError):
    """Base class for backend call failures."""


class TransportError(BackendError):
    """Network-level failure (connect, timeout, 5xx). Retryable."""


class ProtocolError(BackendError):
    """The endpoint answered, but the response violates the wire contract. Not retryable."""


class ExhaustedError(BackendError):
    """All retry attempts failed with transport errors."""

    def __init__(self, message: str, attempts: int, last_error: Exception | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.last_error = last_error


class LlmFormatError(PatchCapError):
    """The LLM reply could not be parsed into the required schema, even after repair."""


class InvalidStateError(PatchCapError):
    """A pipeline stage was invoked with state that violates its preconditions."""


class StoreIoError(PatchCapError):
    """The response cache could not read or write its backing files."""


class IntegrityError(PatchCapError):
    """Two different responses were stored under the same cache key."""


class ConfigError(PatchCapError, ValueError):
    """Run configuration is missing or inconsistent."""
