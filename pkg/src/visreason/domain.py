"""Core vocabulary: polarities, image references, episodes, rule summaries."""

from __future__ import annotations

import hashlib
import json
import re
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from .errors import AmbiguousCategory, CategoryError, EmptyRule, LabelError, SchemaError, ShapeError

CONTEXT_SIZE = 6
RULE_WORD_LIMIT = 20

# Bongard-OpenWorld commonsense rule categories.
COMMONSENSE_CATEGORIES = {
    0: "Anything else",
    1: "Human-Object Interaction (HOI)",
    2: "Taste / Nutrition / Food",
    3: "Color / Material / Shape",
    4: "Functionality / Status / Affordance",
    5: "And / Or / Not",
    6: "Factual Knowledge",
    7: "Meta Class",
    8: "Relationship",
    9: "Unusual Observations",
}

HOI_SPLITS = ("sosa", "soua", "uosa", "uoua")


class Polarity(str, Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"

    @property
    def category(self) -> str:
        """Prompt-side name: positives are ``cat_2``, negatives ``cat_1``."""
        return "cat_2" if self is Polarity.POSITIVE else "cat_1"

    @property
    def short(self) -> str:
        return "pos" if self is Polarity.POSITIVE else "neg"

    @property
    def opposite(self) -> Polarity:
        return Polarity.NEGATIVE if self is Polarity.POSITIVE else Polarity.POSITIVE


_CAT_TOKEN = re.compile(r"cat(?:egory)?[\s_\-]?([12])(?!\d)")


def polarity_from_category(tag: str) -> Polarity:
    """Map a ``cat_1``/``cat_2`` tag (with any decoration) to a polarity."""
    text = tag.strip().casefold().replace("\\_", "_")
    text = text.strip("()[]*_`'\" .:")
    found = {m.group(1) for m in _CAT_TOKEN.finditer(text)}
    if found == {"2"}:
        return Polarity.POSITIVE
    if found == {"1"}:
        return Polarity.NEGATIVE
    raise AmbiguousCategory(f"cannot map {tag!r} to exactly one category")


_LABEL_ALIASES = {
    "pos": Polarity.POSITIVE,
    "positive": Polarity.POSITIVE,
    "cat_2": Polarity.POSITIVE,
    "1": Polarity.POSITIVE,
    "true": Polarity.POSITIVE,
    "neg": Polarity.NEGATIVE,
    "negative": Polarity.NEGATIVE,
    "cat_1": Polarity.NEGATIVE,
    "0": Polarity.NEGATIVE,
    "false": Polarity.NEGATIVE,
}


def parse_label(value: Any) -> Polarity:
    if isinstance(value, Polarity):
        return value
    if value is None:
        raise LabelError("query label missing")
    key = str(value).strip().casefold()
    if key not in _LABEL_ALIASES:
        raise LabelError(f"unmappable query label {value!r}")
    return _LABEL_ALIASES[key]


@dataclass(frozen=True)
class ImageRef:
    """An image identified by its bytes.

    ``sha256`` may be supplied up front (e.g. from a manifest); otherwise it
    is computed from the file on first access of :attr:`content_hash`.
    """

    id: str
    path: str
    sha256: str | None = field(default=None, compare=False)
    data: bytes | None = field(default=None, compare=False, repr=False)

    def read_bytes(self) -> bytes:
        if self.data is not None:
            return self.data
        return Path(self.path).read_bytes()

    @property
    def content_hash(self) -> str:
        if self.sha256 is None:
            object.__setattr__(self, "sha256", hashlib.sha256(self.read_bytes()).hexdigest())
        return self.sha256  # type: ignore[return-value]

    @classmethod
    def from_bytes(cls, data: bytes, id: str | None = None) -> ImageRef:
        digest = hashlib.sha256(data).hexdigest()
        return cls(id=id or digest[:12], path=f"mem://{digest}", sha256=digest, data=data)


def image_ref(spec: Any, root: str | Path | None = None) -> ImageRef:
    """Build an :class:`ImageRef` from a path string, a mapping, or a ref."""
    if isinstance(spec, ImageRef):
        return spec
    if isinstance(spec, (str, Path)):
        spec = {"path": str(spec)}
    if not isinstance(spec, Mapping) or "path" not in spec:
        raise ShapeError(f"bad image locator {spec!r}")
    path = str(spec["path"])
    if root is not None and "://" not in path and not Path(path).is_absolute():
        path = str(Path(root) / path)
    return ImageRef(id=str(spec.get("id") or Path(path).stem), path=path, sha256=spec.get("sha256"))


@dataclass(frozen=True)
class BongardEpisode:
    episode_id: str
    dataset: str  # "openworld" or "hoi"
    positives: tuple[ImageRef, ...]
    negatives: tuple[ImageRef, ...]
    query: ImageRef
    query_label: Polarity
    split: str | None = None
    commonsense_id: int | None = None
    rule_caption: str | None = None

    @property
    def source(self) -> str:
        return f"hoi:{self.split}" if self.dataset == "hoi" else self.dataset

    @property
    def images(self) -> tuple[ImageRef, ...]:
        """All images in request order: positives, negatives, query."""
        return (*self.positives, *self.negatives, self.query)


@dataclass(frozen=True)
class WinogroundSample:
    """Ground truth pairs are (caption_0, image_0) and (caption_1, image_1)."""

    sample_id: str
    image_0: ImageRef
    image_1: ImageRef
    caption_0: str
    caption_1: str


def _first(raw: Mapping[str, Any], *keys: str, default: Any = None) -> Any:
    for key in keys:
        if key in raw:
            return raw[key]
    return default


def validate_episode(
    raw: Mapping[str, Any] | BongardEpisode,
    root: str | Path | None = None,
    check_images: bool = True,
) -> BongardEpisode:
    """Validate a raw episode record (or an existing episode) and return it typed.

    With ``check_images`` the positive, negative and query images are required
    to be distinct by content hash, which reads any image whose hash is not
    already known.
    """
    if isinstance(raw, BongardEpisode):
        ep = raw
        pos, neg, query = list(ep.positives), list(ep.negatives), ep.query
        label, cs, dataset, split = ep.query_label, ep.commonsense_id, ep.dataset, ep.split
        episode_id, caption = ep.episode_id, ep.rule_caption
    else:
        pos = [image_ref(x, root) for x in _first(raw, "positives", default=[])]
        neg = [image_ref(x, root) for x in _first(raw, "negatives", default=[])]
        q = _first(raw, "query")
        if q is None or isinstance(q, (list, tuple)):
            raise ShapeError("episode needs exactly one query image")
        query = image_ref(q, root)
        label = parse_label(_first(raw, "query_label", "label"))
        cs = _first(raw, "commonsense_id", "commonsense")
        split = _first(raw, "split")
        dataset = str(_first(raw, "dataset", default="hoi" if split else "openworld")).lower()
        episode_id = str(_first(raw, "episode_id", "id", default=""))
        caption = _first(raw, "rule_caption", "caption")
        if not episode_id:
            raise ShapeError("episode id missing")

    if len(pos) != CONTEXT_SIZE or len(neg) != CONTEXT_SIZE:
        raise ShapeError(
            f"episode {episode_id}: expected {CONTEXT_SIZE}/{CONTEXT_SIZE} context images, "
            f"got {len(pos)}/{len(neg)}"
        )
    if dataset not in ("openworld", "hoi"):
        raise ShapeError(f"unknown dataset {dataset!r}")
    if dataset == "hoi":
        if split not in HOI_SPLITS:
            raise ShapeError(f"unknown HOI split {split!r}")
        if cs is not None:
            raise CategoryError("commonsense_id is only defined for OpenWorld episodes")
    if cs is not None:
        if isinstance(cs, bool) or not isinstance(cs, int) and not str(cs).isdigit():
            raise CategoryError(f"commonsense_id {cs!r} is not an integer")
        cs = int(cs)
        if cs not in COMMONSENSE_CATEGORIES:
            raise CategoryError(f"commonsense_id {cs} outside 0-9")

    if check_images:
        pos_h = {im.content_hash for im in pos}
        neg_h = {im.content_hash for im in neg}
        if pos_h & neg_h:
            raise ShapeError(f"episode {episode_id}: positive and negative sets share an image")
        if query.content_hash in pos_h | neg_h:
            raise ShapeError(f"episode {episode_id}: query image appears in its context")

    return BongardEpisode(
        episode_id=episode_id,
        dataset=dataset,
        positives=tuple(pos),
        negatives=tuple(neg),
        query=query,
        query_label=label,
        split=split if dataset == "hoi" else None,
        commonsense_id=cs,
        rule_caption=caption,
    )


@dataclass(frozen=True)
class RuleSummary:
    text: str
    word_count: int
    within_limit: bool


def count_rule_words(text: str) -> RuleSummary:
    stripped = text.strip()
    if not stripped:
        raise EmptyRule("rule text is empty")
    n = len(stripped.split())
    return RuleSummary(text=stripped, word_count=n, within_limit=n <= RULE_WORD_LIMIT)


# --------------------------------------------------------------------------
# structured image descriptions

DESCRIPTION_SECTIONS = (
    "Scene",
    "Objects",
    "Activities",
    "Contextual Elements",
    "Visual Patterns",
    "Emotional Undertones",
    "Textual Information",
    "Summary",
)

_FENCE = re.compile(r"```[A-Za-z]*[ \t]*\n?(.*?)```", re.DOTALL)
_MISSING_COMMA = re.compile(r'("|\]|\}|\d|true|false|null)([ \t]*\n\s*)(")')
_TRAILING_COMMA = re.compile(r",(\s*[}\]])")


def strip_code_fences(text: str) -> str:
    m = _FENCE.search(text)
    return (m.group(1) if m else text).strip()


def _norm_key(key: str) -> str:
    return re.sub(r"[^a-z]", "", key.lower())


def _section(doc: Mapping[str, Any], name: str, default: Any = None) -> Any:
    want = _norm_key(name)
    for k, v in doc.items():
        if _norm_key(str(k)) == want:
            return v
    return default


def _text(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    return json.dumps(value, ensure_ascii=False, sort_keys=True)


def _items(value: Any) -> tuple[Any, ...]:
    if value is None or value == "":
        return ()
    if isinstance(value, list):
        return tuple(value)
    return (value,)


def _load_object(text: str) -> dict[str, Any] | None:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        return None
    return obj if isinstance(obj, dict) else None


@dataclass(frozen=True)
class ImageDescription:
    scene: str
    living_beings: tuple[Any, ...]
    inanimate_objects: tuple[Any, ...]
    activities: tuple[Any, ...]
    time_of_day: str
    weather: str
    dominant_colors: tuple[Any, ...]
    textures: tuple[Any, ...]
    emotional_undertones: str
    textual_information: str
    summary: str
    raw_document: str
    repaired: bool = False

    @property
    def document(self) -> str:
        """The reply with any code fence removed; what reasoning prompts splice in."""
        return strip_code_fences(self.raw_document)


def parse_description(raw: str) -> ImageDescription:
    """Parse a description reply into an :class:`ImageDescription`.

    Code fences are removed first. If the text does not parse, one repair pass
    keeps only the outermost ``{...}`` span and fixes missing or trailing
    commas (the requested schema itself omits three commas). All eight
    top-level sections must be present, though they may be empty.
    """
    text = strip_code_fences(raw)
    doc = _load_object(text)
    repaired = False
    if doc is None:
        repaired = True
        lo, hi = text.find("{"), text.rfind("}")
        candidate = text[lo : hi + 1] if 0 <= lo < hi else text
        doc = _load_object(candidate)
        if doc is None:
            fixed = _TRAILING_COMMA.sub(r"\1", _MISSING_COMMA.sub(r"\1,\2\3", candidate))
            doc = _load_object(fixed)
        if doc is None:
            raise SchemaError("description is not a JSON object, even after repair")

    missing = [s for s in DESCRIPTION_SECTIONS if _section(doc, s, _MISSING) is _MISSING]
    if missing:
        raise SchemaError(f"description lacks section(s): {', '.join(missing)}")

    scene = _section(doc, "Scene")
    if isinstance(scene, Mapping):
        scene = _section(scene, "Description", scene)
    objects = _section(doc, "Objects") or {}
    context = _section(doc, "Contextual Elements") or {}
    patterns = _section(doc, "Visual Patterns") or {}
    if not isinstance(objects, Mapping):
        objects = {"Inanimate Objects": objects}
    if not isinstance(context, Mapping):
        context = {"Time of Day": context}
    if not isinstance(patterns, Mapping):
        patterns = {"Dominant Colors": patterns}
    return ImageDescription(
        scene=_text(scene),
        living_beings=_items(_section(objects, "Living Beings")),
        inanimate_objects=_items(_section(objects, "Inanimate Objects")),
        activities=_items(_section(doc, "Activities")),
        time_of_day=_text(_section(context, "Time of Day")),
        weather=_text(_section(context, "Weather")),
        dominant_colors=_items(_section(patterns, "Dominant Colors")),
        textures=_items(_section(patterns, "Textures")),
        emotional_undertones=_text(_section(doc, "Emotional Undertones")),
        textual_information=_text(_section(doc, "Textual Information")),
        summary=_text(_section(doc, "Summary")),
        raw_document=raw,
        repaired=repaired,
    )


_MISSING = object()
