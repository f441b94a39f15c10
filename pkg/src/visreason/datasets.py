"""Manifest ingestion and evaluation-subset construction.

All manifests are JSON Lines (one record per line, UTF-8). Image locators are
resolved relative to the manifest's directory. See ``docs/formats.md``.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any

from .domain import (
    COMMONSENSE_CATEGORIES,
    CONTEXT_SIZE,
    BongardEpisode,
    ImageRef,
    Polarity,
    WinogroundSample,
    image_ref,
    validate_episode,
)
from .errors import HarnessError, InsufficientPool, InsufficientSources, ManifestError

SOURCE_SIDE = 7


class HoiSplit(str, Enum):
    SOSA = "sosa"  # seen object, seen action
    SOUA = "soua"  # seen object, unseen action
    UOSA = "uosa"  # unseen object, seen action
    UOUA = "uoua"  # unseen object, unseen action


@dataclass(frozen=True)
class OpenWorldSource:
    source_id: str
    positives: tuple[ImageRef, ...]
    negatives: tuple[ImageRef, ...]
    commonsense_id: int
    rule_caption: str


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield ``(line_number, record)``; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise ManifestError("record is not an object", lineno)
            yield lineno, rec


def load_openworld_manifest(path: str | Path) -> list[OpenWorldSource]:
    root = Path(path).parent
    sources = []
    for lineno, rec in iter_jsonl(path):
        try:
            pos = tuple(image_ref(x, root) for x in rec["positives"])
            neg = tuple(image_ref(x, root) for x in rec["negatives"])
            sid = str(rec["id"])
            cs = rec["commonsense"] if "commonsense" in rec else rec["commonsense_id"]
            caption = rec.get("caption", rec.get("rule_caption", ""))
        except (KeyError, TypeError, HarnessError) as exc:
            raise ManifestError(f"malformed source record: {exc}", lineno) from None
        if len(pos) != SOURCE_SIDE or len(neg) != SOURCE_SIDE:
            raise ManifestError(
                f"source {sid}: expected {SOURCE_SIDE}/{SOURCE_SIDE} images, got {len(pos)}/{len(neg)}",
                lineno,
            )
        if isinstance(cs, bool) or not isinstance(cs, int) or cs not in COMMONSENSE_CATEGORIES:
            raise ManifestError(f"source {sid}: commonsense id {cs!r} outside 0-9", lineno)
        sources.append(OpenWorldSource(sid, pos, neg, cs, str(caption)))
    return sources


def build_openworld_subset(sources: Sequence[OpenWorldSource], k: int) -> list[BongardEpisode]:
    """Two episodes per source from the first ``k`` sources.

    The held-out query is the last image of the respective 7-image side; the
    first six of each side form the context.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if k > len(sources):
        raise InsufficientSources(f"asked for {k} sources, manifest has {len(sources)}")
    episodes = []
    for src in sources[:k]:
        pos_ctx, neg_ctx = src.positives[:CONTEXT_SIZE], src.negatives[:CONTEXT_SIZE]
        for label, query in (
            (Polarity.POSITIVE, src.positives[CONTEXT_SIZE]),
            (Polarity.NEGATIVE, src.negatives[CONTEXT_SIZE]),
        ):
            episodes.append(
                BongardEpisode(
                    episode_id=f"{src.source_id}_{label.short}_0",
                    dataset="openworld",
                    positives=pos_ctx,
                    negatives=neg_ctx,
                    query=query,
                    query_label=label,
                    commonsense_id=src.commonsense_id,
                    rule_caption=src.rule_caption,
                )
            )
    return episodes


def load_episode_manifest(path: str | Path, check_images: bool = False) -> list[BongardEpisode]:
    """Load ready-made episodes (e.g. a Bongard-HOI pool)."""
    root = Path(path).parent
    out = []
    for lineno, rec in iter_jsonl(path):
        try:
            out.append(validate_episode(rec, root=root, check_images=check_images))
        except (HarnessError, KeyError, TypeError) as exc:
            raise ManifestError(str(exc), lineno) from None
    return out


def sample_hoi_split(
    split: HoiSplit | str, pool: Sequence[BongardEpisode], n: int, seed: int
) -> list[BongardEpisode]:
    """Seeded stratified sample of ``n`` episodes, half of each query polarity.

    Only pool episodes belonging to ``split`` are eligible. Each stratum is
    sampled without replacement, then the union is shuffled with the same RNG.
    """
    split = HoiSplit(split)
    if n < 0 or n % 2:
        raise ValueError(f"n must be a non-negative even number, got {n}")
    eligible = [ep for ep in pool if ep.split == split.value]
    rng = random.Random(f"{split.value}:{seed}")
    picked: list[BongardEpisode] = []
    for polarity in (Polarity.POSITIVE, Polarity.NEGATIVE):
        stratum = [ep for ep in eligible if ep.query_label is polarity]
        if len(stratum) < n // 2:
            raise InsufficientPool(
                f"split {split.value}: need {n // 2} {polarity.value} episodes, pool has {len(stratum)}"
            )
        picked.extend(rng.sample(stratum, n // 2))
    rng.shuffle(picked)
    return picked


def load_winoground(path: str | Path) -> list[WinogroundSample]:
    root = Path(path).parent
    samples = []
    for lineno, rec in iter_jsonl(path):
        try:
            samples.append(
                WinogroundSample(
                    sample_id=str(rec["id"]),
                    image_0=image_ref(rec["image_0"], root),
                    image_1=image_ref(rec["image_1"], root),
                    caption_0=_caption(rec, "caption_0"),
                    caption_1=_caption(rec, "caption_1"),
                )
            )
        except (KeyError, TypeError, HarnessError) as exc:
            raise ManifestError(f"malformed Winoground record: {exc}", lineno) from None
    return samples


def _caption(rec: dict[str, Any], key: str) -> str:
    value = rec[key]
    if not isinstance(value, str) or not value.strip():
        raise ManifestError(f"{key} must be a non-empty string")
    return value


def read_id_list(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip() and not line.startswith("#")]


def select_ids(episodes: Iterable[Any], ids: Sequence[str], key: str = "episode_id") -> list[Any]:
    """Restrict ``episodes`` to ``ids`` and return them in listed order."""
    by_id = {getattr(ep, key): ep for ep in episodes}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ManifestError(f"{len(missing)} listed ids not found, e.g. {missing[0]!r}")
    return [by_id[i] for i in ids]


def category_histogram(episodes: Iterable[BongardEpisode]) -> dict[int, tuple[int, Fraction]]:
    """Count and share of each commonsense category, most frequent first."""
    counts = Counter(ep.commonsense_id for ep in episodes if ep.commonsense_id is not None)
    total = sum(counts.values())
    return {
        cid: (c, Fraction(c, total))
        for cid, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    }


def load_external_descriptions(path: str | Path) -> dict[str, str]:
    """``content_hash -> raw description document`` from a JSONL file."""
    out: dict[str, str] = {}
    for lineno, rec in iter_jsonl(path):
        try:
            h, doc = str(rec["content_hash"]), rec.get("document", rec.get("description"))
        except KeyError:
            raise ManifestError("description record needs content_hash", lineno) from None
        if not isinstance(doc, str):
            raise ManifestError("description record needs a document string", lineno)
        out.setdefault(h, doc)
    return out


def load_rules(path: str | Path) -> dict[str, str]:
    """``episode_id -> rule text``; the id may name a source or a full episode id."""
    out: dict[str, str] = {}
    for lineno, rec in iter_jsonl(path):
        try:
            out[str(rec["episode_id"] if "episode_id" in rec else rec["id"])] = str(rec["rule"])
        except KeyError:
            raise ManifestError("rule record needs episode_id and rule", lineno) from None
    return out


def source_id(episode_id: str) -> str:
    """``"12_pos_0"`` -> ``"12"``; other ids are returned unchanged."""
    for suffix in ("_pos_0", "_neg_0"):
        if episode_id.endswith(suffix):
            return episode_id[: -len(suffix)]
    return episode_id


def rule_for(rules: dict[str, str], episode: BongardEpisode) -> str | None:
    return rules.get(episode.episode_id, rules.get(source_id(episode.episode_id)))
