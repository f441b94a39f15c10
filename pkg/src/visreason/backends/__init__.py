"""Model access: chat completion, embeddings and deterministic replay."""

from __future__ import annotations

from pathlib import Path

from .base import (
    DEFAULT_MAX_OUTPUT_TOKENS,
    Backend,
    Capabilities,
    EmbeddingVector,
    Message,
    ModelRequest,
    ModelResponse,
    RetryPolicy,
    complete,
    embed,
    fingerprint,
    user_request,
)
from .images import EncodedImage, encode_image
from .remote import OllamaBackend, OpenAICompatBackend
from .scripted import ScriptedBackend, scripted_register

__all__ = [
    "DEFAULT_MAX_OUTPUT_TOKENS",
    "Backend",
    "Capabilities",
    "EmbeddingVector",
    "EncodedImage",
    "Message",
    "ModelRequest",
    "ModelResponse",
    "OllamaBackend",
    "OpenAICompatBackend",
    "RetryPolicy",
    "ScriptedBackend",
    "complete",
    "embed",
    "encode_image",
    "fingerprint",
    "make_backend",
    "scripted_register",
    "user_request",
]

_GEMINI_URL = "https://generativelanguage.googleapis.com/v1beta/openai"


def make_backend(
    spec: str, max_images: int | None = None, max_in_flight: int = 4
) -> tuple[Backend, str]:
    """Resolve ``provider:model`` into a backend and the model id to send.

    Providers: ``openai``, ``gemini``, ``ollama`` and ``scripted`` (whose
    suffix is a fixture file; the model id is then the file stem unless the
    form ``scripted:<fixture>#<model>`` is used).
    """
    provider, _, model = spec.partition(":")
    if not model:
        raise ValueError(f"model spec {spec!r} must look like provider:model")
    caps_kw = {} if max_images is None else {"max_images": max_images}
    if provider == "openai":
        backend: Backend = OpenAICompatBackend(
            "openai", capabilities=Capabilities(embeddings=True, **caps_kw), max_in_flight=max_in_flight
        )
    elif provider == "gemini":
        backend = OpenAICompatBackend(
            "gemini",
            api_key_env="GEMINI_API_KEY",
            base_url_env="GEMINI_BASE_URL",
            default_base_url=_GEMINI_URL,
            capabilities=Capabilities(embeddings=True, **caps_kw),
            embedding_model="text-embedding-004",
            max_in_flight=max_in_flight,
        )
    elif provider == "ollama":
        backend = OllamaBackend(
            capabilities=Capabilities(
                max_images=1 if max_images is None else max_images,
                embeddings=True,
                max_image_dimension=1024,
            ),
            max_in_flight=max_in_flight,
        )
    elif provider == "scripted":
        fixture, _, model_id = model.partition("#")
        backend = ScriptedBackend(
            capabilities=Capabilities(embeddings=True, **caps_kw), max_in_flight=max_in_flight
        )
        backend.load(fixture)
        model = model_id or Path(fixture).stem
    else:
        raise ValueError(f"unknown provider {provider!r}")
    return backend, model
