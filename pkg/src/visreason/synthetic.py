"""Synthetic datasets and scripted replies for offline runs and tests.

Images are tiny PNGs whose pixels derive from a name, so distinct names give
distinct content hashes. Reply builders produce exactly the requests the
paradigm runners will send, so a :class:`ScriptedBackend` can replay a whole
run without a network.
"""

from __future__ import annotations

import hashlib
import io
import json
import random
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

from PIL import Image

from .backends import ScriptedBackend, user_request
from .datasets import SOURCE_SIDE
from .domain import (
    CONTEXT_SIZE,
    HOI_SPLITS,
    BongardEpisode,
    ImageRef,
    Polarity,
    WinogroundSample,
    strip_code_fences,
)
from .prompting import (
    TemplateId,
    render_ca_describe,
    render_ca_reason,
    render_drl_apply,
    render_drl_extract,
    render_dvrl,
    render_winoground_choice,
)


def png_bytes(name: str, size: int = 8) -> bytes:
    raw = b""
    counter = 0
    while len(raw) < size * size * 3:
        raw += hashlib.sha256(f"{name}:{counter}".encode()).digest()
        counter += 1
    im = Image.frombytes("RGB", (size, size), raw[: size * size * 3])
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


def memory_image(name: str) -> ImageRef:
    return ImageRef.from_bytes(png_bytes(name), id=name)


def make_episode(
    episode_id: str,
    label: Polarity,
    dataset: str = "openworld",
    split: str | None = None,
    commonsense_id: int | None = 0,
    caption: str = "",
) -> BongardEpisode:
    pos = tuple(memory_image(f"{episode_id}/p{i}") for i in range(CONTEXT_SIZE))
    neg = tuple(memory_image(f"{episode_id}/n{i}") for i in range(CONTEXT_SIZE))
    return BongardEpisode(
        episode_id=episode_id,
        dataset=dataset,
        positives=pos,
        negatives=neg,
        query=memory_image(f"{episode_id}/q"),
        query_label=label,
        split=split,
        commonsense_id=commonsense_id if dataset == "openworld" else None,
        rule_caption=caption or f"rule of {episode_id}",
    )


def balanced_episodes(n: int, prefix: str = "ep") -> list[BongardEpisode]:
    labels = (Polarity.POSITIVE, Polarity.NEGATIVE)
    return [make_episode(f"{prefix}{i:04d}", labels[i % 2], commonsense_id=i % 10) for i in range(n)]


# --------------------------------------------------------------------------
# on-disk manifests


def _write_png(root: Path, rel: str) -> str:
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png_bytes(rel))
    return rel


def write_openworld_manifest(root: str | Path, n_sources: int, images: bool = True, seed: int = 0) -> Path:
    """A source manifest with 7+7 images per source; categories drawn with ``seed``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    lines = []
    for s in range(n_sources):
        sid = f"ow{s:04d}"
        pos = [f"img/{sid}/pos_{i}.png" for i in range(SOURCE_SIDE)]
        neg = [f"img/{sid}/neg_{i}.png" for i in range(SOURCE_SIDE)]
        if images:
            for rel in pos + neg:
                _write_png(root, rel)
        lines.append(
            {
                "id": sid,
                "positives": pos,
                "negatives": neg,
                "commonsense": rng.choice(range(10)),
                "caption": f"synthetic rule {s}",
            }
        )
    path = root / "openworld.jsonl"
    path.write_text("".join(json.dumps(x) + "\n" for x in lines), encoding="utf-8")
    return path


def write_hoi_manifest(
    root: str | Path, counts: Mapping[str, tuple[int, int]], images: bool = False
) -> Path:
    """An episode pool; ``counts`` maps split -> (positives, negatives)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for split, (n_pos, n_neg) in counts.items():
        for label, count in (("pos", n_pos), ("neg", n_neg)):
            for i in range(count):
                eid = f"{split}_{label}_{i:05d}"
                rels = [f"img/{eid}/p{j}.png" for j in range(CONTEXT_SIZE)]
                rels += [f"img/{eid}/n{j}.png" for j in range(CONTEXT_SIZE)]
                rels.append(f"img/{eid}/q.png")
                if images:
                    for rel in rels:
                        _write_png(root, rel)
                lines.append(
                    {
                        "id": eid,
                        "dataset": "hoi",
                        "split": split,
                        "positives": rels[:CONTEXT_SIZE],
                        "negatives": rels[CONTEXT_SIZE : 2 * CONTEXT_SIZE],
                        "query": rels[-1],
                        "label": label,
                    }
                )
    path = root / "hoi.jsonl"
    path.write_text("".join(json.dumps(x) + "\n" for x in lines), encoding="utf-8")
    return path


def hoi_pool(counts: Mapping[str, tuple[int, int]] | None = None) -> list[BongardEpisode]:
    """In-memory imbalanced HOI pool (the default is deliberately lopsided)."""
    counts = counts or {"sosa": (120, 110), "soua": (400, 240), "uosa": (130, 130), "uoua": (140, 60)}
    pool = []
    for split in HOI_SPLITS:
        n_pos, n_neg = counts.get(split, (0, 0))
        for label, count in ((Polarity.POSITIVE, n_pos), (Polarity.NEGATIVE, n_neg)):
            for i in range(count):
                eid = f"{split}_{label.short}_{i:05d}"
                pool.append(make_episode(eid, label, dataset="hoi", split=split, commonsense_id=None))
    return pool


# --------------------------------------------------------------------------
# replies


def structured_reply(conclusion: Polarity | str, rule: str = "objects share a theme", style: int = 0) -> str:
    """A four-field reply in one of several decoration styles."""
    cat = conclusion.category if isinstance(conclusion, Polarity) else conclusion
    styles = (
        "- **Analysis**: {a}\n- **Rule**: {r}\n- **Query Image**: {q}\n- **Conclusion**: {c}\n",
        "**Analysis**: {a}\n\n**Rule**: {r}\n\n**Query Image**: {q}\n\n**Conclusion**: {c}",
        "Analysis: {a}\nRule: {r}\nQuery Image: {q}\nConclusion: {c}\n",
        "### Analysis\n{a}\n\n### Rule\n{r}\n\n### Test Image\n{q}\n\n### Conclusion\n{c}\n",
        "1. **Analysis**: {a}\n2. **Rule**: {r}\n3. **Test Image**: {q}\n4. **Conclusion**: `{c}`\n",
    )
    return styles[style % len(styles)].format(
        a="cat_2 images share one theme that cat_1 images lack.", r=rule, q="The query shows a scene.", c=cat
    )


def description_document(name: str, fenced: bool = False) -> str:
    doc = {
        "Scene": {"Description": f"scene of {name}"},
        "Objects": {"Living Beings": [], "Inanimate Objects": [name]},
        "Activities": [],
        "Contextual Elements": {"Time of Day": "day", "Weather": "clear"},
        "Visual Patterns": {"Dominant Colors": ["grey"], "Textures": []},
        "Emotional Undertones": "neutral",
        "Textual Information": "",
        "Summary": f"an image named {name}",
    }
    text = json.dumps(doc, indent=1)
    return f"```json\n{text}\n```" if fenced else text


def script_dvrl(
    backend: ScriptedBackend, episode: BongardEpisode, model_id: str, reply: str, minimal: bool = False
) -> str:
    prompt = render_dvrl(len(episode.positives), len(episode.negatives), minimal=minimal)
    return backend.register_request(user_request(model_id, prompt, episode.images, tag="dvrl"), reply)


def script_drl(
    backend: ScriptedBackend, episode: BongardEpisode, model_id: str, stage1: str, summary: str, reply: str
) -> None:
    m, n = len(episode.positives), len(episode.negatives)
    context = (*episode.positives, *episode.negatives)
    backend.register_request(user_request(model_id, render_drl_extract(m, n), context, tag="drl_extract"), stage1)
    backend.register_request(
        user_request(model_id, render_drl_apply(m, n, summary), (episode.query,), tag="drl_apply"), reply
    )


def script_rule_apply(backend: ScriptedBackend, episode: BongardEpisode, model_id: str, rule: str, reply: str) -> None:
    m, n = len(episode.positives), len(episode.negatives)
    backend.register_request(
        user_request(model_id, render_drl_apply(m, n, rule), (episode.query,), tag="rule_apply"), reply
    )


def script_describe(backend: ScriptedBackend, images: Iterable[ImageRef], model_id: str, fenced: bool = False) -> dict[str, str]:
    """Register one description per image; returns content_hash -> document."""
    docs = {}
    for im in images:
        doc = description_document(f"{im.id} {im.content_hash[:8]}", fenced=fenced)
        backend.register_request(user_request(model_id, render_ca_describe(), (im,), tag="ca_describe"), doc)
        docs[im.content_hash] = doc
    return docs


def script_ca(
    backend: ScriptedBackend,
    episode: BongardEpisode,
    describer_id: str | None,
    reasoner_id: str,
    reply: str,
    documents: Mapping[str, str] | None = None,
    section_style: str = "blocks",
) -> None:
    """Register describe replies (unless ``documents`` is given) and the reasoning reply."""
    if documents is None:
        assert describer_id is not None
        documents = script_describe(backend, episode.images, describer_id)
    texts = [strip_code_fences(documents[im.content_hash]) for im in episode.images]
    prompt = render_ca_reason(texts, len(episode.positives), len(episode.negatives), section_style=section_style)
    backend.register_request(user_request(reasoner_id, prompt, (), tag="ca_reason"), reply)


def script_winoground(
    backend: ScriptedBackend,
    sample: WinogroundSample,
    documents: Mapping[str, str],
    reasoner_id: str,
    replies: Sequence[str],
) -> None:
    """``replies`` answer, in order, caption-for-D0, caption-for-D1, description-for-C0, description-for-C1."""
    d0 = strip_code_fences(documents[sample.image_0.content_hash])
    d1 = strip_code_fences(documents[sample.image_1.content_hash])
    c0, c1 = sample.caption_0, sample.caption_1
    asks = [
        ("wg_caption_for_d0", TemplateId.WG_CAPTION_CHOICE, d0, c0, c1),
        ("wg_caption_for_d1", TemplateId.WG_CAPTION_CHOICE, d1, c0, c1),
        ("wg_description_for_c0", TemplateId.WG_IMAGE_CHOICE, c0, d0, d1),
        ("wg_description_for_c1", TemplateId.WG_IMAGE_CHOICE, c1, d0, d1),
    ]
    for (tag, kind, anchor, a, b), reply in zip(asks, replies):
        backend.register_request(user_request(reasoner_id, render_winoground_choice(kind, anchor, a, b), tag=tag), reply)


def make_winoground_sample(sample_id: str) -> WinogroundSample:
    return WinogroundSample(
        sample_id=sample_id,
        image_0=memory_image(f"{sample_id}/i0"),
        image_1=memory_image(f"{sample_id}/i1"),
        caption_0=f"a dog chasing a cat ({sample_id})",
        caption_1=f"a cat chasing a dog ({sample_id})",
    )


__all__ = [
    "balanced_episodes",
    "description_document",
    "hoi_pool",
    "make_episode",
    "make_winoground_sample",
    "memory_image",
    "png_bytes",
    "script_ca",
    "script_describe",
    "script_drl",
    "script_dvrl",
    "script_rule_apply",
    "script_winoground",
    "structured_reply",
    "write_hoi_manifest",
    "write_openworld_manifest",
]
