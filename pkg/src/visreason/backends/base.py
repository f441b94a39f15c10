from __future__ import annotations

import hashlib
import json
import logging
import random
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any, TypeVar

from ..domain import ImageRef
from ..errors import (
    BackendError,
    InputError,
    OversizePayloadError,
    RateLimitError,
    TransportError,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_MAX_OUTPUT_TOKENS = 2048


@dataclass(frozen=True)
class Message:
    role: str  # "system" | "user" | "assistant"
    text: str
    images: tuple[ImageRef, ...] = ()


@dataclass(frozen=True)
class ModelRequest:
    model_id: str
    messages: tuple[Message, ...]
    request_tag: str = ""
    temperature: float = 0.0
    max_output_tokens: int | None = DEFAULT_MAX_OUTPUT_TOKENS

    def __post_init__(self) -> None:
        if not self.model_id:
            raise InputError("model_id is required")
        if not self.messages:
            raise InputError("request has no messages")
        for msg in self.messages:
            if msg.images and msg.role != "user":
                raise InputError(f"images attached to a {msg.role!r} message")

    @property
    def image_count(self) -> int:
        return sum(len(m.images) for m in self.messages)

    @property
    def text(self) -> str:
        return "\n".join(m.text for m in self.messages)


def user_request(
    model_id: str, text: str, images: Sequence[ImageRef] = (), tag: str = "", **kw: Any
) -> ModelRequest:
    return ModelRequest(model_id, (Message("user", text, tuple(images)),), request_tag=tag, **kw)


def fingerprint(request: ModelRequest) -> str:
    """Stable hash over model id, message texts and image content hashes."""
    payload = {
        "model": request.model_id,
        "messages": [
            [m.role, m.text, [im.content_hash for im in m.images]] for m in request.messages
        ],
    }
    blob = json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ModelResponse:
    text: str
    finish_reason: str = "stop"
    latency_ms: int = 0
    token_usage: dict[str, int] | None = None
    backend_id: str = ""


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model_id: str


@dataclass(frozen=True)
class Capabilities:
    max_images: int | None = None  # None: unbounded
    vision: bool = True
    embeddings: bool = False
    max_image_dimension: int | None = None


@dataclass
class RetryPolicy:
    """Exponential backoff for transient transport failures and rate limits."""

    delays: tuple[float, ...] = (1.0, 4.0, 16.0)
    jitter: float = 0.25
    sleep: Callable[[float], None] = time.sleep
    rng: random.Random = field(default_factory=random.Random)

    def call(self, fn: Callable[[], T]) -> T:
        attempt = 0
        while True:
            try:
                return fn()
            except (TransportError, RateLimitError) as exc:
                if attempt >= len(self.delays):
                    raise
                delay = self.delays[attempt] * (1 + self.jitter * self.rng.uniform(-1, 1))
                if isinstance(exc, RateLimitError) and exc.retry_after:
                    delay = max(delay, exc.retry_after)
                logger.warning("retry %d after %.1fs: %s", attempt + 1, delay, exc)
                self.sleep(delay)
                attempt += 1


class Backend:
    """Base class for model backends.

    Subclasses implement ``_complete`` and optionally ``_embed``. The public
    methods enforce capability limits, bound in-flight calls and apply the
    retry policy; retries never alter the request.
    """

    def __init__(
        self,
        backend_id: str,
        capabilities: Capabilities | None = None,
        max_in_flight: int = 4,
        retry: RetryPolicy | None = None,
    ):
        self.backend_id = backend_id
        self.capabilities = capabilities or Capabilities()
        self.retry = retry or RetryPolicy()
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.backend_id!r})"

    def check_request(self, request: ModelRequest) -> None:
        n = request.image_count
        caps = self.capabilities
        if n and not caps.vision:
            raise OversizePayloadError(f"{self.backend_id} does not accept images")
        if caps.max_images is not None and n > caps.max_images:
            raise OversizePayloadError(
                f"{self.backend_id} accepts at most {caps.max_images} image(s) per request, got {n}"
            )

    def complete(self, request: ModelRequest) -> ModelResponse:
        self.check_request(request)
        with self._slots:
            return self.retry.call(lambda: self._complete(request))

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        if not texts:
            raise InputError("embed() needs at least one text")
        with self._slots:
            vectors = self.retry.call(lambda: self._embed(list(texts)))
        if len(vectors) != len(texts):
            raise BackendError(f"expected {len(texts)} embeddings, got {len(vectors)}")
        dims = {len(v.values) for v in vectors}
        if len(dims) != 1 or 0 in dims:
            raise BackendError(f"non-uniform or empty embedding dimensions {sorted(dims)}")
        return vectors

    def _complete(self, request: ModelRequest) -> ModelResponse:
        raise NotImplementedError

    def _embed(self, texts: list[str]) -> list[EmbeddingVector]:
        raise BackendError(f"{self.backend_id} does not provide embeddings")


def complete(backend: Backend, request: ModelRequest) -> ModelResponse:
    return backend.complete(request)


def embed(backend: Backend, texts: Sequence[str]) -> list[EmbeddingVector]:
    return backend.embed(texts)
