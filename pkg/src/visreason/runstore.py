"""Run directories: a manifest plus an append-only JSONL record file.

Layout::

    <runs_dir>/<run_id>/manifest.json
    <runs_dir>/<run_id>/records.jsonl
    <runs_dir>/<run_id>/writer.lock

The run id embeds a hash of the config snapshot, so changing any setting
mid-run starts a new run instead of mixing records.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Union

from filelock import FileLock, Timeout

from .analysis import ParadigmResult, WinogroundChoiceSet
from .domain import Polarity, RuleSummary
from .errors import DuplicateRecord, HarnessError, ManifestMissing
from .paradigms import EvaluationRecord, Paradigm

logger = logging.getLogger(__name__)

WINOGROUND_PARADIGM = "WinogroundCA"

StoredRecord = Union[EvaluationRecord, WinogroundChoiceSet]


class RunStatus(str, Enum):
    IN_PROGRESS = "InProgress"
    COMPLETE = "Complete"
    ABORTED = "Aborted"


def _canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(config: Mapping[str, Any]) -> str:
    return hashlib.sha256(_canonical_json(config).encode("utf-8")).hexdigest()[:10]


def make_run_id(config: Mapping[str, Any]) -> str:
    model = str(config.get("model", "")).split("#")[-1].split(":")[-1]
    parts = [str(config.get("dataset", "")), str(config.get("paradigm", "")), Path(model).name]
    slug = re.sub(r"[^A-Za-z0-9.]+", "-", "_".join(p for p in parts if p)).strip("-").lower()
    return f"{slug or 'run'}-{config_hash(config)}"


@dataclass
class RunManifest:
    run_id: str
    config: dict[str, Any]
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    status: RunStatus = RunStatus.IN_PROGRESS
    inapplicable: str | None = None  # capability mismatch reason, rendered as "-"

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["status"] = self.status.value
        return d

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> RunManifest:
        return cls(
            run_id=d["run_id"],
            config=dict(d["config"]),
            created_at=d.get("created_at", ""),
            status=RunStatus(d.get("status", RunStatus.IN_PROGRESS.value)),
            inapplicable=d.get("inapplicable"),
        )


# --------------------------------------------------------------------------
# record (de)serialization


def record_to_json(rec: StoredRecord) -> dict[str, Any]:
    if isinstance(rec, WinogroundChoiceSet):
        d = asdict(rec)
        d["replies"] = dict(rec.replies)
        return {"kind": "winoground", **d}
    d = {
        "kind": "bongard",
        "run_id": rec.run_id,
        "episode_id": rec.episode_id,
        "paradigm": rec.paradigm.value,
        "model_id": rec.model_id,
        "describer_model_id": rec.describer_model_id,
        "query_label": rec.query_label.value,
        "query_hash": rec.query_hash,
        "correct": rec.correct,
        "result": None,
        "rule": None,
        "raw_replies": dict(rec.raw_replies),
        "descriptions_used": list(rec.descriptions_used),
        "flags": list(rec.flags),
        "error": rec.error,
        "timing": dict(rec.timing),
        "usage": dict(rec.usage),
    }
    if rec.result is not None:
        d["result"] = {**asdict(rec.result), "conclusion": rec.result.conclusion.value}
    if rec.rule is not None:
        d["rule"] = asdict(rec.rule)
    return d


def record_from_json(d: Mapping[str, Any]) -> StoredRecord:
    if d.get("kind") == "winoground":
        fields = {k: v for k, v in d.items() if k != "kind"}
        return WinogroundChoiceSet(**fields)
    result = d.get("result")
    rule = d.get("rule")
    return EvaluationRecord(
        run_id=d.get("run_id", ""),
        episode_id=d["episode_id"],
        paradigm=Paradigm(d["paradigm"]),
        model_id=d["model_id"],
        describer_model_id=d.get("describer_model_id"),
        query_label=Polarity(d["query_label"]),
        query_hash=d["query_hash"],
        correct=bool(d["correct"]),
        result=None if result is None else ParadigmResult(**{**result, "conclusion": Polarity(result["conclusion"])}),
        rule=None if rule is None else RuleSummary(**rule),
        raw_replies=dict(d.get("raw_replies", {})),
        descriptions_used=tuple(d.get("descriptions_used", ())),
        flags=tuple(d.get("flags", ())),
        error=d.get("error"),
        timing=dict(d.get("timing", {})),
        usage=dict(d.get("usage", {})),
    )


def record_key(rec: StoredRecord, run_id: str) -> tuple[str, str, str]:
    if isinstance(rec, WinogroundChoiceSet):
        return (run_id, rec.sample_id, WINOGROUND_PARADIGM)
    return (rec.run_id or run_id, rec.episode_id, rec.paradigm.value)


# --------------------------------------------------------------------------
# store


class RunLocked(HarnessError):
    pass


class RunStore:
    """One run directory. Appends are serialized in-process and across processes."""

    def __init__(self, runs_dir: str | Path, run_id: str, fsync: bool = False):
        self.runs_dir = Path(runs_dir)
        self.run_id = run_id
        self.dir = self.runs_dir / run_id
        self.fsync = fsync
        self._lock = threading.Lock()
        self._writer: FileLock | None = None
        self._keys: set[tuple[str, str, str]] | None = None

    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    @property
    def records_path(self) -> Path:
        return self.dir / "records.jsonl"

    # manifest -------------------------------------------------------------

    @classmethod
    def create(cls, runs_dir: str | Path, config: Mapping[str, Any], fsync: bool = False) -> RunStore:
        """Open the run for ``config``, creating it if it does not exist yet."""
        config = json.loads(_canonical_json(config))
        store = cls(runs_dir, make_run_id(config), fsync=fsync)
        if store.manifest_path.exists():
            existing = store.manifest()
            if existing.config != config:
                raise HarnessError(f"run {store.run_id} exists with a different config")
        else:
            store.dir.mkdir(parents=True, exist_ok=True)
            store._write_manifest(RunManifest(store.run_id, config))
        return store

    @classmethod
    def open(cls, runs_dir: str | Path, run_id: str, fsync: bool = False) -> RunStore:
        store = cls(runs_dir, run_id, fsync=fsync)
        if not store.manifest_path.exists():
            raise ManifestMissing(f"no manifest for run {run_id} under {runs_dir}")
        return store

    def manifest(self) -> RunManifest:
        try:
            return RunManifest.from_json(json.loads(self.manifest_path.read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ManifestMissing(f"no manifest for run {self.run_id}") from None

    def _write_manifest(self, manifest: RunManifest) -> None:
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.manifest_path)

    def set_status(self, status: RunStatus, inapplicable: str | None = None) -> RunManifest:
        m = self.manifest()
        m.status = status
        if inapplicable is not None:
            m.inapplicable = inapplicable
        self._write_manifest(m)
        return m

    # writer lock ----------------------------------------------------------

    def __enter__(self) -> RunStore:
        self.acquire()
        return self

    def __exit__(self, *exc: Any) -> None:
        self.release()

    def acquire(self) -> None:
        """Take the advisory one-writer-per-run lock."""
        if self._writer is None:
            self._writer = FileLock(str(self.dir / "writer.lock"))
        try:
            self._writer.acquire(timeout=0)
        except Timeout:
            raise RunLocked(f"run {self.run_id} is being written by another process") from None

    def release(self) -> None:
        if self._writer is not None and self._writer.is_locked:
            self._writer.release()

    # records ----------------------------------------------------------------

    def _read_lines(self) -> list[str]:
        if not self.records_path.exists():
            return []
        return self.records_path.read_text(encoding="utf-8").splitlines(keepends=True)

    def repair(self) -> int:
        """Drop a torn trailing line left by a crash. Returns lines dropped."""
        lines = self._read_lines()
        if not lines:
            return 0
        last = lines[-1]
        try:
            record_from_json(json.loads(last))
            if last.endswith("\n"):
                return 0
            # valid but unterminated; finish the line
            with self.records_path.open("a", encoding="utf-8") as fh:
                fh.write("\n")
            return 0
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            logger.warning("%s: dropping corrupt trailing record", self.records_path)
            with self.records_path.open("r+", encoding="utf-8") as fh:
                fh.truncate(sum(len(ln.encode("utf-8")) for ln in lines[:-1]))
            self._keys = None
            return 1

    def records(self) -> list[StoredRecord]:
        out = []
        lines = self._read_lines()
        for i, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                out.append(record_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                logger.warning("%s:%d: skipping corrupt record", self.records_path, i)
        return out

    def keys(self) -> set[tuple[str, str, str]]:
        if self._keys is None:
            self._keys = {record_key(r, self.run_id) for r in self.records()}
        return self._keys

    def append_record(self, rec: StoredRecord) -> StoredRecord:
        if isinstance(rec, EvaluationRecord) and not rec.run_id:
            rec = replace(rec, run_id=self.run_id)
        key = record_key(rec, self.run_id)
        line = json.dumps(record_to_json(rec), ensure_ascii=False, sort_keys=True)
        with self._lock:
            if key in self.keys():
                raise DuplicateRecord(f"record {key} already stored")
            self.dir.mkdir(parents=True, exist_ok=True)
            with self.records_path.open("a", encoding="utf-8", newline="\n") as fh:
                fh.write(line + "\n")
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
            self.keys().add(key)
        return rec


def append_record(store: RunStore, record: StoredRecord) -> StoredRecord:
    return store.append_record(record)


def resume_run(store: RunStore, episodes: Sequence[Any], paradigm: str | None = None) -> list[Any]:
    """Episodes (or Winoground samples) without a persisted record, in input order."""
    if not store.manifest_path.exists():
        raise ManifestMissing(f"no manifest for run {store.run_id}")
    store.repair()
    done = {(eid, par) for _, eid, par in store.keys()}
    if paradigm is None:
        paradigm = store.manifest().config.get("paradigm")
    out = []
    for ep in episodes:
        eid = getattr(ep, "episode_id", None) or getattr(ep, "sample_id")
        par = WINOGROUND_PARADIGM if hasattr(ep, "sample_id") else _paradigm_value(paradigm)
        if (eid, par) not in done:
            out.append(ep)
    return out


def _paradigm_value(name: str | None) -> str | None:
    if name is None:
        return None
    try:
        return Paradigm.parse(name).value
    except ValueError:
        return name


def load_runs(runs_dir: str | Path, run_ids: Iterable[str]) -> tuple[list[StoredRecord], list[RunManifest]]:
    records: list[StoredRecord] = []
    manifests = []
    for rid in run_ids:
        store = RunStore.open(runs_dir, rid)
        manifests.append(store.manifest())
        records.extend(store.records())
    return records, manifests
