"""Exception hierarchy for the harness.

Everything derives from :class:`HarnessError` so the CLI can map failures to
exit codes without catching unrelated bugs.
"""

from __future__ import annotations


class HarnessError(Exception):
    pass


# domain / validation

class AmbiguousCategory(HarnessError, ValueError):
    pass


class ShapeError(HarnessError, ValueError):
    pass


class LabelError(HarnessError, ValueError):
    pass


class CategoryError(HarnessError, ValueError):
    pass


class EmptyRule(HarnessError, ValueError):
    pass


# datasets

class ManifestError(HarnessError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InsufficientSources(HarnessError, ValueError):
    pass


class InsufficientPool(HarnessError, ValueError):
    pass


# backends

class BackendError(HarnessError):
    """A model call failed. Subclasses say how."""


class TransportError(BackendError):
    pass


class AuthError(BackendError):
    pass


class RateLimitError(BackendError):
    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class OversizePayloadError(BackendError):
    pass


class ReplayMiss(BackendError, KeyError):
    def __init__(self, fingerprint: str, nearest: str | None = None):
        self.fingerprint = fingerprint
        self.nearest = nearest
        msg = f"no scripted reply for fingerprint {fingerprint}"
        if nearest:
            msg += f" (nearest registered: {nearest})"
        super().__init__(msg)

    def __str__(self) -> str:  # KeyError would repr() the message
        return self.args[0]


class InputError(HarnessError, ValueError):
    pass


class DecodeError(HarnessError, ValueError):
    pass


# prompting

class ParamError(HarnessError, ValueError):
    pass


class CountMismatch(HarnessError, ValueError):
    pass


class EmptyField(HarnessError, ValueError):
    pass


# paradigms

class CapabilityError(HarnessError):
    pass


class SummaryExtractionError(HarnessError, ValueError):
    pass


class SchemaError(HarnessError, ValueError):
    pass


class MissingDescription(HarnessError, KeyError):
    def __init__(self, content_hash: str):
        self.content_hash = content_hash
        super().__init__(f"no description for image {content_hash}")

    def __str__(self) -> str:
        return self.args[0]


class ChoiceParseError(HarnessError, ValueError):
    pass


# analysis

class Unparseable(HarnessError, ValueError):
    def __init__(self, raw: str, reason: str = "no unambiguous conclusion"):
        self.raw = raw
        self.reason = reason
        super().__init__(reason)


class EmptyInput(HarnessError, ValueError):
    pass


class MissingCategory(HarnessError, ValueError):
    pass


class DimensionMismatch(HarnessError, ValueError):
    pass


class ZeroVector(HarnessError, ValueError):
    pass


# runstore

class DuplicateRecord(HarnessError):
    pass


class ManifestMissing(HarnessError, FileNotFoundError):
    pass


class UnknownGrouping(HarnessError, ValueError):
    pass
