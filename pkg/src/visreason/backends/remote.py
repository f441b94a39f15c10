"""HTTP adapters: OpenAI-compatible chat completions and the Ollama local API."""

from __future__ import annotations

import os
import threading
import time
from typing import Any

import httpx

from ..errors import AuthError, BackendError, OversizePayloadError, RateLimitError, TransportError
from .base import Backend, Capabilities, EmbeddingVector, ModelRequest, ModelResponse, RetryPolicy
from .images import EncodedImage, encode_image


def _retry_after(resp: httpx.Response) -> float | None:
    value = resp.headers.get("retry-after")
    try:
        return float(value) if value is not None else None
    except ValueError:
        return None


def _raise_for_status(resp: httpx.Response, backend_id: str) -> None:
    code = resp.status_code
    if code < 400:
        return
    detail = resp.text[:300]
    if code in (401, 403):
        raise AuthError(f"{backend_id}: HTTP {code}: {detail}")
    if code == 429:
        raise RateLimitError(f"{backend_id}: rate limited", retry_after=_retry_after(resp))
    if code == 413:
        raise OversizePayloadError(f"{backend_id}: payload too large")
    if code >= 500:
        raise TransportError(f"{backend_id}: HTTP {code}: {detail}")
    raise BackendError(f"{backend_id}: HTTP {code}: {detail}")


class _HttpBackend(Backend):
    def __init__(
        self,
        backend_id: str,
        base_url: str,
        capabilities: Capabilities,
        client: httpx.Client | None = None,
        timeout: float = 300.0,
        max_in_flight: int = 4,
        retry: RetryPolicy | None = None,
    ):
        super().__init__(backend_id, capabilities, max_in_flight=max_in_flight, retry=retry)
        self.base_url = base_url.rstrip("/")
        self.client = client or httpx.Client(timeout=timeout)
        self._encoded: dict[str, EncodedImage] = {}
        self._enc_lock = threading.Lock()

    def _encode(self, image) -> EncodedImage:
        key = image.content_hash
        with self._enc_lock:
            hit = self._encoded.get(key)
        if hit is None:
            hit = encode_image(image, self.capabilities.max_image_dimension)
            with self._enc_lock:
                self._encoded[key] = hit
        return hit

    def _headers(self) -> dict[str, str]:
        return {}

    def _post(self, path: str, payload: dict[str, Any]) -> tuple[dict[str, Any], int]:
        headers = self._headers()  # may raise AuthError before any network traffic
        start = time.perf_counter()
        try:
            resp = self.client.post(f"{self.base_url}{path}", json=payload, headers=headers)
        except httpx.TimeoutException as exc:
            raise TransportError(f"{self.backend_id}: timeout: {exc}") from None
        except httpx.TransportError as exc:
            raise TransportError(f"{self.backend_id}: {exc}") from None
        latency = int((time.perf_counter() - start) * 1000)
        _raise_for_status(resp, self.backend_id)
        try:
            return resp.json(), latency
        except ValueError:
            raise TransportError(f"{self.backend_id}: non-JSON response body") from None


class OpenAICompatBackend(_HttpBackend):
    """Chat-completions protocol with inline base64 image parts.

    Works against OpenAI and any endpoint speaking the same protocol (Gemini's
    OpenAI-compatible surface, vLLM, ...).
    """

    def __init__(
        self,
        backend_id: str = "openai",
        base_url: str | None = None,
        api_key_env: str = "OPENAI_API_KEY",
        base_url_env: str = "OPENAI_BASE_URL",
        default_base_url: str = "https://api.openai.com/v1",
        capabilities: Capabilities | None = None,
        embedding_model: str = "text-embedding-3-large",
        **kw: Any,
    ):
        url = base_url or os.environ.get(base_url_env) or default_base_url
        super().__init__(backend_id, url, capabilities or Capabilities(embeddings=True), **kw)
        self.api_key_env = api_key_env
        self.embedding_model = embedding_model

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise AuthError(f"{self.backend_id}: environment variable {self.api_key_env} is not set")
        return {"Authorization": f"Bearer {key}"}

    def build_payload(self, request: ModelRequest) -> dict[str, Any]:
        messages = []
        for msg in request.messages:
            if msg.images:
                parts: list[dict[str, Any]] = [{"type": "text", "text": msg.text}]
                for im in msg.images:
                    parts.append({"type": "image_url", "image_url": {"url": self._encode(im).data_url}})
                messages.append({"role": msg.role, "content": parts})
            else:
                messages.append({"role": msg.role, "content": msg.text})
        payload: dict[str, Any] = {
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
        }
        if request.max_output_tokens:
            payload["max_tokens"] = request.max_output_tokens
        return payload

    def _complete(self, request: ModelRequest) -> ModelResponse:
        body, latency = self._post("/chat/completions", self.build_payload(request))
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise BackendError(f"{self.backend_id}: unexpected reply shape") from None
        usage = body.get("usage") or None
        if usage:
            usage = {k: v for k, v in usage.items() if isinstance(v, int)}
        return ModelResponse(
            text=text,
            finish_reason=choice.get("finish_reason") or "stop",
            latency_ms=latency,
            token_usage=usage,
            backend_id=self.backend_id,
        )

    def _embed(self, texts: list[str]) -> list[EmbeddingVector]:
        body, _ = self._post("/embeddings", {"model": self.embedding_model, "input": texts})
        rows = sorted(body.get("data", []), key=lambda r: r.get("index", 0))
        return [EmbeddingVector(tuple(r["embedding"]), self.embedding_model) for r in rows]


class OllamaBackend(_HttpBackend):
    """Ollama ``/api/chat`` protocol. Images are capped at 1024px by default."""

    def __init__(
        self,
        backend_id: str = "ollama",
        base_url: str | None = None,
        capabilities: Capabilities | None = None,
        embedding_model: str = "nomic-embed-text",
        **kw: Any,
    ):
        url = base_url or os.environ.get("OLLAMA_HOST") or "http://localhost:11434"
        if "://" not in url:
            url = f"http://{url}"
        caps = capabilities or Capabilities(max_images=1, embeddings=True, max_image_dimension=1024)
        super().__init__(backend_id, url, caps, **kw)
        self.embedding_model = embedding_model

    def build_payload(self, request: ModelRequest) -> dict[str, Any]:
        messages = []
        for msg in request.messages:
            m: dict[str, Any] = {"role": msg.role, "content": msg.text}
            if msg.images:
                m["images"] = [self._encode(im).data for im in msg.images]
            messages.append(m)
        options: dict[str, Any] = {"temperature": request.temperature}
        if request.max_output_tokens:
            options["num_predict"] = request.max_output_tokens
        return {"model": request.model_id, "messages": messages, "stream": False, "options": options}

    def _complete(self, request: ModelRequest) -> ModelResponse:
        body, latency = self._post("/api/chat", self.build_payload(request))
        try:
            text = body["message"]["content"]
        except (KeyError, TypeError):
            raise BackendError(f"{self.backend_id}: unexpected reply shape") from None
        usage = {
            k: body[src]
            for k, src in (("prompt_tokens", "prompt_eval_count"), ("completion_tokens", "eval_count"))
            if isinstance(body.get(src), int)
        }
        return ModelResponse(
            text=text,
            finish_reason=body.get("done_reason") or "stop",
            latency_ms=latency,
            token_usage=usage or None,
            backend_id=self.backend_id,
        )

    def _embed(self, texts: list[str]) -> list[EmbeddingVector]:
        body, _ = self._post("/api/embed", {"model": self.embedding_model, "input": texts})
        return [EmbeddingVector(tuple(v), self.embedding_model) for v in body.get("embeddings", [])]
