"""Append-only cache of stage-1 image descriptions.

Keyed by (describer model id, image content hash, describe-template hash), so
entries survive file moves and are invalidated by any template change.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from filelock import FileLock

logger = logging.getLogger(__name__)

CacheKey = tuple[str, str, str]


@dataclass(frozen=True)
class DescriptionCacheEntry:
    key: CacheKey
    document: str
    created_at: str


class DescriptionCache:
    """In-memory when ``path`` is None, otherwise backed by a JSONL file."""

    def __init__(self, path: str | Path | None = None, fsync: bool = False):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self._entries: dict[CacheKey, DescriptionCacheEntry] = {}
        self._write_lock = threading.Lock()
        self._key_locks: dict[CacheKey, threading.Lock] = {}
        self.hits = 0
        self.misses = 0
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        assert self.path is not None
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    key = (rec["describer"], rec["content_hash"], rec["template"])
                except (json.JSONDecodeError, KeyError):
                    logger.warning("%s:%d: skipping corrupt cache line", self.path, lineno)
                    continue
                self._entries.setdefault(key, DescriptionCacheEntry(key, rec["document"], rec.get("created_at", "")))

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._entries

    def documents(self, describer: str) -> dict[str, str]:
        """``content_hash -> document`` for one describer, any template."""
        return {k[1]: e.document for k, e in self._entries.items() if k[0] == describer}

    def key_lock(self, key: CacheKey) -> threading.Lock:
        """Per-key lock so concurrent misses on one image make a single call."""
        with self._write_lock:
            return self._key_locks.setdefault(key, threading.Lock())

    def get(self, key: CacheKey) -> str | None:
        entry = self._entries.get(key)
        if entry is None:
            self.misses += 1
            return None
        self.hits += 1
        return entry.document

    def put(self, key: CacheKey, document: str) -> DescriptionCacheEntry:
        """Store a document; an existing entry for ``key`` is kept, never replaced."""
        with self._write_lock:
            existing = self._entries.get(key)
            if existing is not None:
                return existing
            entry = DescriptionCacheEntry(key, document, datetime.now(timezone.utc).isoformat())
            if self.path is not None:
                self._append(entry)
            self._entries[key] = entry
            return entry

    def _append(self, entry: DescriptionCacheEntry) -> None:
        assert self.path is not None
        self.path.parent.mkdir(parents=True, exist_ok=True)
        describer, content_hash, template = entry.key
        line = json.dumps(
            {
                "describer": describer,
                "content_hash": content_hash,
                "template": template,
                "document": entry.document,
                "created_at": entry.created_at,
            },
            ensure_ascii=False,
        )
        with FileLock(str(self.path) + ".lock"):
            with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                fh.write(line + "\n")
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
