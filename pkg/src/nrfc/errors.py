"""Exception taxonomy.

Every error raised on a public surface derives from :class:`NrfcError` and
carries a stable machine-readable ``code`` so the CLI can emit structured
diagnostics. Malformed external input (files, containers, streams) must map
to one of these types, never to a bare ``ValueError`` or a crash.
"""

from __future__ import annotations


class NrfcError(Exception):
    """Base class for all library errors."""

    code = "error"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_json(self) -> dict:
        out = {"error": self.code, "message": self.message}
        if self.details:
            out["details"] = {k: v for k, v in self.details.items()}
        return out


class InputError(NrfcError):
    """Caller passed values outside a documented precondition."""

    code = "input"


class ConfigError(NrfcError):
    """Inconsistent shapes, channel counts, or profile settings."""

    code = "config"


class LoadError(NrfcError):
    """A checkpoint or archive could not be loaded. ``details['offenders']``
    lists the missing or mismatched entries when applicable."""

    code = "load"


class CodingError(NrfcError):
    """Entropy-coding failure: symbol without a table, escape overflow, or
    an internal coder invariant violation."""

    code = "coding"


class ContainerError(NrfcError):
    """Base for malformed container input."""

    code = "container"


class BadMagicError(ContainerError):
    code = "bad_magic"


class VersionError(ContainerError):
    code = "unknown_version"


class UnknownStreamError(ContainerError):
    code = "unknown_stream"


class TruncatedError(ContainerError):
    """Stream or container ended early. ``details['position']`` is the byte
    offset at which the read failed."""

    code = "truncated"


class LengthOverrunError(ContainerError):
    """A declared substream length points past the end of the container."""

    code = "length_overrun"


class DigestMismatchError(ContainerError):
    """Container was produced against a different frozen decoder setup."""

    code = "digest_mismatch"


class TrainingDivergedError(NrfcError):
    code = "diverged"
