"""The evaluation pipelines, each run on one test case.

* DVRL: one call with all 13 images.
* DRL: rule extraction from the 12 context images, then rule application to
  the query image given only the extracted summary.
* CA: one description per image, then text-only reasoning over the 13
  descriptions. Descriptions may come from another model or a file.
* RuleApply: DRL's second stage with an externally supplied rule.

Backend failures and unparseable replies end up in the returned record rather
than being raised; capability mismatches raise :class:`CapabilityError`.
"""

from __future__ import annotations

import logging
import re
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

from .analysis import ParadigmResult, WinogroundChoiceSet, parse_structured_reply
from .backends import Backend, ModelResponse, user_request
from .cache import DescriptionCache
from .domain import (
    CONTEXT_SIZE,
    BongardEpisode,
    ImageDescription,
    ImageRef,
    Polarity,
    RuleSummary,
    WinogroundSample,
    count_rule_words,
    parse_description,
    strip_code_fences,
)
from .errors import (
    BackendError,
    CapabilityError,
    ChoiceParseError,
    EmptyRule,
    MissingDescription,
    SchemaError,
    SummaryExtractionError,
    Unparseable,
)
from .prompting import (
    TemplateId,
    render_ca_describe,
    render_ca_reason,
    render_drl_apply,
    render_drl_extract,
    render_dvrl,
    render_winoground_choice,
    template_hash,
)

logger = logging.getLogger(__name__)


class Paradigm(str, Enum):
    DVRL = "DVRL"
    DRL = "DRL"
    CA = "CA"
    RULE_APPLY = "RuleApply"

    @classmethod
    def parse(cls, name: str) -> Paradigm:
        key = name.strip().lower().replace("_", "-")
        aliases = {"dvrl": cls.DVRL, "drl": cls.DRL, "ca": cls.CA, "rule-apply": cls.RULE_APPLY, "ruleapply": cls.RULE_APPLY}
        if key not in aliases:
            raise ValueError(f"unknown paradigm {name!r}")
        return aliases[key]


@dataclass(frozen=True)
class Model:
    """A backend bound to one model id."""

    backend: Backend
    model_id: str

    def ask(self, text: str, images: Sequence[ImageRef] = (), tag: str = "") -> ModelResponse:
        return self.backend.complete(user_request(self.model_id, text, images, tag=tag))

    def require_images(self, n: int) -> None:
        caps = self.backend.capabilities
        if n and not caps.vision:
            raise CapabilityError(f"{self.model_id} on {self.backend.backend_id} has no vision input")
        if caps.max_images is not None and caps.max_images < n:
            raise CapabilityError(
                f"{self.model_id} on {self.backend.backend_id} accepts {caps.max_images} image(s) per request, needs {n}"
            )


@dataclass(frozen=True)
class EvaluationRecord:
    episode_id: str
    paradigm: Paradigm
    model_id: str
    query_label: Polarity
    query_hash: str
    result: ParadigmResult | None
    correct: bool
    raw_replies: Mapping[str, str] = field(default_factory=dict)
    rule: RuleSummary | None = None
    describer_model_id: str | None = None
    descriptions_used: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()
    error: str | None = None
    run_id: str = ""
    timing: Mapping[str, int] = field(default_factory=dict)
    usage: Mapping[str, int] = field(default_factory=dict)

    def without_timing(self) -> EvaluationRecord:
        return replace(self, timing={}, usage={})

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.run_id, self.episode_id, self.paradigm.value)

    @property
    def complete(self) -> bool:
        """False when a backend failure cut the pipeline short."""
        return self.error is None


class _Trace:
    """Collects raw replies, latencies and token usage across stages."""

    def __init__(self) -> None:
        self.replies: dict[str, str] = {}
        self.timing: dict[str, int] = {}
        self.usage: dict[str, int] = {}

    def ask(self, model: Model, stage: str, text: str, images: Sequence[ImageRef] = ()) -> str:
        start = time.perf_counter()
        resp = model.ask(text, images, tag=stage)
        self.timing[stage] = resp.latency_ms or int((time.perf_counter() - start) * 1000)
        for k, v in (resp.token_usage or {}).items():
            self.usage[k] = self.usage.get(k, 0) + v
        self.replies[stage] = resp.text
        return resp.text


def _finish(
    episode: BongardEpisode,
    paradigm: Paradigm,
    model_id: str,
    trace: _Trace,
    reply: str | None,
    lenient: bool = False,
    flags: Sequence[str] = (),
    error: str | None = None,
    **extra: Any,
) -> EvaluationRecord:
    flags = list(flags)
    result = None
    if reply is not None:
        try:
            result = parse_structured_reply(reply, lenient=lenient)
        except Unparseable as exc:
            flags.append("unparseable")
            logger.debug("episode %s: %s", episode.episode_id, exc.reason)
    return EvaluationRecord(
        episode_id=episode.episode_id,
        paradigm=paradigm,
        model_id=model_id,
        query_label=episode.query_label,
        query_hash=episode.query.content_hash,
        result=result,
        correct=result is not None and result.conclusion is episode.query_label,
        raw_replies=dict(trace.replies),
        flags=tuple(flags),
        error=error,
        timing=dict(trace.timing),
        usage=dict(trace.usage),
        **extra,
    )


def _backend_error(exc: BackendError) -> str:
    return f"{type(exc).__name__}: {exc}"


# --------------------------------------------------------------------------
# DVRL


def run_dvrl(episode: BongardEpisode, model: Model, prompt_variant: str = "structured") -> EvaluationRecord:
    if prompt_variant not in ("structured", "minimal"):
        raise ValueError(f"unknown prompt variant {prompt_variant!r}")
    images = episode.images
    model.require_images(len(images))
    minimal = prompt_variant == "minimal"
    prompt = render_dvrl(len(episode.positives), len(episode.negatives), minimal=minimal)
    trace = _Trace()
    flags = ["minimal_prompt"] if minimal else []
    try:
        reply = trace.ask(model, "dvrl", prompt, images)
    except BackendError as exc:
        return _finish(episode, Paradigm.DVRL, model.model_id, trace, None, flags=flags, error=_backend_error(exc))
    return _finish(episode, Paradigm.DVRL, model.model_id, trace, reply, lenient=minimal, flags=flags)


# --------------------------------------------------------------------------
# DRL

_SUMMARY = re.compile(r"summary", re.IGNORECASE)
_SUMMARY_HEADER_TAIL = re.compile(r"^[^\n:.]{0,40}:")
_SUMMARY_STRIP = " \t\r\n*_#:,;-=>\"'`"


def extract_summary(reply: str) -> str:
    """Text after the last case-insensitive ``summary`` marker.

    A short header tail such as ``" of the rule:**"`` and any markdown or
    punctuation decoration before the rule text are dropped.
    """
    matches = list(_SUMMARY.finditer(reply))
    if not matches:
        raise SummaryExtractionError("reply has no summary marker")
    tail = reply[matches[-1].end() :]
    header = _SUMMARY_HEADER_TAIL.match(tail)
    if header:
        tail = tail[header.end() :]
    text = tail.strip(_SUMMARY_STRIP).strip()
    if not text:
        raise SummaryExtractionError("summary marker is followed by no text")
    return text


def run_drl(episode: BongardEpisode, model: Model) -> EvaluationRecord:
    context = (*episode.positives, *episode.negatives)
    model.require_images(len(context))
    m, n = len(episode.positives), len(episode.negatives)
    trace = _Trace()
    flags: list[str] = []
    try:
        stage1 = trace.ask(model, "drl_extract", render_drl_extract(m, n), context)
    except BackendError as exc:
        return _finish(episode, Paradigm.DRL, model.model_id, trace, None, error=_backend_error(exc))

    try:
        summary_text = extract_summary(stage1)
    except SummaryExtractionError:
        flags.append("summary_fallback")
        summary_text = stage1
    try:
        rule = count_rule_words(summary_text)
    except EmptyRule:
        flags.append("empty_rule")
        return _finish(episode, Paradigm.DRL, model.model_id, trace, None, flags=flags)
    if not rule.within_limit:
        flags.append("rule_over_limit")

    try:
        reply = trace.ask(model, "drl_apply", render_drl_apply(m, n, rule), (episode.query,))
    except BackendError as exc:
        return _finish(
            episode, Paradigm.DRL, model.model_id, trace, None, flags=flags, error=_backend_error(exc), rule=rule
        )
    return _finish(episode, Paradigm.DRL, model.model_id, trace, reply, flags=flags, rule=rule)


def run_rule_application(
    episode: BongardEpisode, external_rule: RuleSummary | str, model: Model
) -> EvaluationRecord:
    rule = external_rule if isinstance(external_rule, RuleSummary) else count_rule_words(external_rule)
    model.require_images(1)
    trace = _Trace()
    prompt = render_drl_apply(len(episode.positives), len(episode.negatives), rule)
    try:
        reply = trace.ask(model, "rule_apply", prompt, (episode.query,))
    except BackendError as exc:
        return _finish(episode, Paradigm.RULE_APPLY, model.model_id, trace, None, error=_backend_error(exc), rule=rule)
    return _finish(episode, Paradigm.RULE_APPLY, model.model_id, trace, reply, rule=rule)


# --------------------------------------------------------------------------
# CA


def description_key(describer_id: str, image: ImageRef) -> tuple[str, str, str]:
    return (describer_id, image.content_hash, template_hash(TemplateId.CA_DESCRIBE))


def fetch_description(image: ImageRef, describer: Model, cache: DescriptionCache) -> str:
    """Raw stage-1 reply for ``image``, from the cache or one backend call."""
    key = description_key(describer.model_id, image)
    with cache.key_lock(key):
        doc = cache.get(key)
        if doc is None:
            describer.require_images(1)
            doc = describer.ask(render_ca_describe(), (image,), tag="ca_describe").text
            cache.put(key, doc)
    return doc


def describe_image(image: ImageRef, describer: Model, cache: DescriptionCache) -> ImageDescription:
    return parse_description(fetch_description(image, describer, cache))


class DescriptionSource:
    """Where CA gets the text for each image."""

    describer_id: str

    def document(self, image: ImageRef) -> str:
        raise NotImplementedError


class SelfGenerated(DescriptionSource):
    def __init__(self, describer: Model, cache: DescriptionCache | None = None):
        self.describer = describer
        self.cache = cache if cache is not None else DescriptionCache()
        self.describer_id = describer.model_id
        self.schema_failures: set[str] = set()

    def document(self, image: ImageRef) -> str:
        raw = fetch_description(image, self.describer, self.cache)
        try:
            return parse_description(raw).document
        except SchemaError:
            # keep the reply; the reasoner can still read it
            self.schema_failures.add(image.content_hash)
            return strip_code_fences(raw)


class External(DescriptionSource):
    """Descriptions produced elsewhere, keyed by image content hash."""

    def __init__(self, documents: Mapping[str, str], describer_id: str = "external"):
        self.documents = dict(documents)
        self.describer_id = describer_id

    def document(self, image: ImageRef) -> str:
        try:
            return strip_code_fences(self.documents[image.content_hash])
        except KeyError:
            raise MissingDescription(image.content_hash) from None


class CacheOnly(DescriptionSource):
    """Use cached descriptions of ``describer_id`` without calling any model."""

    def __init__(self, cache: DescriptionCache, describer_id: str):
        self.cache = cache
        self.describer_id = describer_id

    def document(self, image: ImageRef) -> str:
        doc = self.cache.get(description_key(self.describer_id, image))
        if doc is None:
            raise MissingDescription(image.content_hash)
        return strip_code_fences(doc)


def run_ca(
    episode: BongardEpisode,
    reasoner: Model,
    source: DescriptionSource,
    section_style: str = "blocks",
) -> EvaluationRecord:
    """Describe all 13 images (or look them up), then reason over text only."""
    images = episode.images
    trace = _Trace()
    extra = {
        "describer_model_id": source.describer_id,
        "descriptions_used": tuple(im.content_hash for im in images),
    }
    try:
        docs = [source.document(im) for im in images]
    except BackendError as exc:
        return _finish(episode, Paradigm.CA, reasoner.model_id, trace, None, error=_backend_error(exc), **extra)
    flags = []
    if isinstance(source, SelfGenerated) and source.schema_failures & set(extra["descriptions_used"]):
        flags.append("description_schema_fallback")
    prompt = render_ca_reason(docs, len(episode.positives), len(episode.negatives), section_style=section_style)
    try:
        reply = trace.ask(reasoner, "ca_reason", prompt)
    except BackendError as exc:
        return _finish(
            episode, Paradigm.CA, reasoner.model_id, trace, None, flags=flags, error=_backend_error(exc), **extra
        )
    return _finish(episode, Paradigm.CA, reasoner.model_id, trace, reply, flags=flags, **extra)


# --------------------------------------------------------------------------
# Winoground through CA

_LETTER_ALONE = re.compile(r"^[\W_]*([AB])[\W_]*$")
_LETTER_LEAD = re.compile(
    r"^[\s*_#>\"'`]*(?:(?i:answer|option|choice|caption|image|description|final answer)\s*(?:is)?\s*[:\-]?\s*)"
    r"[*_(\[\"']*([AB])\b"
)
_LETTER_MARKED = re.compile(r"^[\s*_#>\"'`]*[(\[]?([AB])(?:[.):\]]|\*\*)")
_NORM = re.compile(r"[^0-9a-z]+")


def _norm(text: str) -> str:
    return _NORM.sub(" ", text.casefold()).strip()


def parse_choice(reply: str, option_a: str, option_b: str) -> int:
    """0 for A, 1 for B. Accepts a lone letter or an unambiguous echo of one option."""
    text = reply.strip()
    for pattern in (_LETTER_ALONE, _LETTER_LEAD, _LETTER_MARKED):
        m = pattern.match(text)
        if m:
            return "AB".index(m.group(1))
    body = _norm(text)
    hits = [i for i, opt in enumerate((option_a, option_b)) if _norm(opt) and _norm(opt) in body]
    if len(hits) == 1:
        return hits[0]
    raise ChoiceParseError(f"cannot read a choice from {reply[:60]!r}")


def run_winoground_ca(
    sample: WinogroundSample,
    describer: DescriptionSource | Model,
    reasoner: Model,
    cache: DescriptionCache | None = None,
) -> WinogroundChoiceSet:
    """Four forced choices: a caption per description and a description per caption.

    Raises :class:`BackendError` on backend failure; unparseable choices are
    stored as ``None`` and score as wrong.
    """
    source = describer if isinstance(describer, DescriptionSource) else SelfGenerated(describer, cache)
    d0, d1 = source.document(sample.image_0), source.document(sample.image_1)
    c0, c1 = sample.caption_0, sample.caption_1
    trace = _Trace()
    asks = {
        "caption_for_d0": (TemplateId.WG_CAPTION_CHOICE, d0, c0, c1),
        "caption_for_d1": (TemplateId.WG_CAPTION_CHOICE, d1, c0, c1),
        "description_for_c0": (TemplateId.WG_IMAGE_CHOICE, c0, d0, d1),
        "description_for_c1": (TemplateId.WG_IMAGE_CHOICE, c1, d0, d1),
    }
    choices: dict[str, int | None] = {}
    for name, (kind, anchor, a, b) in asks.items():
        reply = trace.ask(reasoner, f"wg_{name}", render_winoground_choice(kind, anchor, a, b))
        try:
            choices[name] = parse_choice(reply, a, b)
        except ChoiceParseError:
            logger.debug("sample %s: unparseable choice for %s", sample.sample_id, name)
            choices[name] = None
    return WinogroundChoiceSet(
        sample_id=sample.sample_id,
        replies=dict(trace.replies),
        model_id=reasoner.model_id,
        describer_model_id=source.describer_id,
        **choices,
    )


def check_applicable(paradigm: Paradigm, model: Model) -> None:
    """Raise :class:`CapabilityError` if ``model`` cannot run ``paradigm`` at all."""
    need = {
        Paradigm.DVRL: 2 * CONTEXT_SIZE + 1,
        Paradigm.DRL: 2 * CONTEXT_SIZE,
        Paradigm.RULE_APPLY: 1,
        Paradigm.CA: 0,
    }[paradigm]
    model.require_images(need)
