"""Deterministic replay backend.

Replies are looked up by request fingerprint. Fixture files are JSON Lines with
``fingerprint`` and ``reply`` keys; ``model_id``, ``request_tag`` and ``text``
are optional and only used to report the nearest entry on a miss.
"""

from __future__ import annotations

import difflib
import json
import threading
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

from ..errors import ReplayMiss
from .base import (
    Backend,
    Capabilities,
    EmbeddingVector,
    ModelRequest,
    ModelResponse,
    fingerprint,
)


class ScriptedBackend(Backend):
    def __init__(
        self,
        backend_id: str = "scripted",
        capabilities: Capabilities | None = None,
        embed_fallback: Callable[[str], Sequence[float]] | None = None,
        max_in_flight: int = 4,
    ):
        super().__init__(
            backend_id,
            capabilities or Capabilities(embeddings=True),
            max_in_flight=max_in_flight,
        )
        self._replies: dict[str, str] = {}
        self._meta: dict[str, dict[str, str]] = {}
        self._vectors: dict[str, tuple[float, ...]] = {}
        self._embed_fallback = embed_fallback
        self._lock = threading.Lock()
        self.calls: list[tuple[str, str]] = []  # (request_tag, fingerprint)

    def register(self, fp: str, reply: str, **meta: str) -> None:
        with self._lock:
            self._replies[fp] = reply
            if meta:
                self._meta[fp] = dict(meta)

    def register_request(self, request: ModelRequest, reply: str) -> str:
        fp = fingerprint(request)
        self.register(
            fp, reply, model_id=request.model_id, request_tag=request.request_tag, text=request.text
        )
        return fp

    def register_embedding(self, text: str, vector: Sequence[float]) -> None:
        with self._lock:
            self._vectors[text] = tuple(float(x) for x in vector)

    def __len__(self) -> int:
        return len(self._replies)

    def _complete(self, request: ModelRequest) -> ModelResponse:
        fp = fingerprint(request)
        with self._lock:
            self.calls.append((request.request_tag, fp))
        reply = self._replies.get(fp)
        if reply is None:
            raise ReplayMiss(fp, self.nearest(request))
        return ModelResponse(text=reply, latency_ms=0, backend_id=self.backend_id)

    def _embed(self, texts: list[str]) -> list[EmbeddingVector]:
        out = []
        for t in texts:
            vec = self._vectors.get(t)
            if vec is None:
                if self._embed_fallback is None:
                    raise ReplayMiss(f"embedding:{t[:40]!r}")
                vec = tuple(float(x) for x in self._embed_fallback(t))
            out.append(EmbeddingVector(vec, self.backend_id))
        return out

    def nearest(self, request: ModelRequest) -> str | None:
        """Registered fingerprint most similar to ``request`` (model, tag, then text)."""
        if not self._replies:
            return None
        text = request.text

        def score(fp: str) -> tuple[Any, ...]:
            meta = self._meta.get(fp, {})
            return (
                meta.get("model_id") == request.model_id,
                meta.get("request_tag") == request.request_tag,
                difflib.SequenceMatcher(None, meta.get("text", ""), text).quick_ratio(),
            )

        return max(list(self._replies), key=score)

    def load(self, path: str | Path) -> int:
        n = 0
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                meta = {k: rec[k] for k in ("model_id", "request_tag", "text") if k in rec}
                self.register(rec["fingerprint"], rec["reply"], **meta)
                n += 1
        return n

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for fp, reply in self._replies.items():
                rec = {"fingerprint": fp, "reply": reply, **self._meta.get(fp, {})}
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def scripted_register(backend: ScriptedBackend, request_fingerprint: str, reply: str) -> None:
    backend.register(request_fingerprint, reply)
