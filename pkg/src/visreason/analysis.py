"""Reply parsing and every score the harness reports."""

from __future__ import annotations

import re
import statistics
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Any

import numpy as np

from .domain import BongardEpisode, Polarity, polarity_from_category
from .errors import AmbiguousCategory, DimensionMismatch, EmptyInput, MissingCategory, Unparseable, ZeroVector

# --------------------------------------------------------------------------
# structured reply parsing

_DECO = r"(?:\*\*|__|\*|_)?"
_FIELD_RE = re.compile(
    r"^[ \t>]*(?:[-+•]\s*|\*\s+|\d+[.)]\s*)?(?:#{1,6}[ \t]*)?" + _DECO + r"[ \t]*"
    r"(?P<label>analysis|rules?|(?:query|test)[ \t]+image(?:[ \t]+details)?|query|(?:final[ \t]+)?conclusion)"
    r"[ \t]*(?:" + _DECO + r"[ \t]*[:：][ \t]*" + _DECO + r"|" + _DECO + r"[ \t]*$)",
    re.IGNORECASE | re.MULTILINE,
)
_LEADING_CAT = re.compile(r"^[\W_]*(cat(?:egory)?[\s_\-]?[12])(?!\d)")
_ALTERNATIVES = re.compile(
    r"^[\W_]*cat(?:egory)?[\s_\-]?[12][\W_]*(?:or|and|vs\.?|versus|/|&|,)[\W_]*cat(?:egory)?[\s_\-]?[12]"
)
_ANY_CAT = re.compile(r"cat(?:egory)?[\s_\-]?[12](?!\d)", re.IGNORECASE)


@dataclass(frozen=True)
class ParadigmResult:
    analysis: str
    rule: str
    query_details: str
    conclusion: Polarity
    raw: str


def _canonical_label(label: str) -> str:
    label = label.lower()
    if label.endswith("conclusion"):
        return "conclusion"
    if label.startswith("rule"):
        return "rule"
    if label.startswith(("query", "test")):
        return "query"
    return label


def split_fields(text: str) -> dict[str, list[str]]:
    """Map canonical label -> list of field bodies, in order of appearance."""
    matches = list(_FIELD_RE.finditer(text))
    out: dict[str, list[str]] = {}
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        body = text[m.end() : end].strip()
        out.setdefault(_canonical_label(m.group("label")), []).append(body)
    return out


def _clean(body: str) -> str:
    return body.strip().strip("*_").strip()


def conclusion_polarity(body: str) -> Polarity:
    """Polarity stated by a Conclusion field body.

    The first non-empty line decides. If it names both categories, a line that
    opens with one of them still counts (``cat_2 (not cat_1 because ...)``),
    unless it just lists the two as alternatives (``cat_1 or cat_2``).
    """
    text = body.replace("\\_", "_")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise AmbiguousCategory("empty conclusion")
    first = lines[0]
    try:
        return polarity_from_category(first)
    except AmbiguousCategory:
        line = first.strip().casefold()
        m = _LEADING_CAT.match(line)
        if m and not _ALTERNATIVES.match(line):
            return polarity_from_category(m.group(1))
        raise


def parse_structured_reply(text: str, lenient: bool = False) -> ParadigmResult:
    """Parse the four-field reply format. Raises :class:`Unparseable`.

    The last Conclusion field wins. With ``lenient`` (for the minimal prompt,
    which has no output contract) a reply without a Conclusion field falls back
    to the last category token anywhere in the text.
    """
    fields = split_fields(text)
    first = {k: _clean(v[0]) for k, v in fields.items()}
    conclusions = fields.get("conclusion")
    try:
        if conclusions:
            polarity = conclusion_polarity(conclusions[-1])
        elif lenient:
            tokens = _ANY_CAT.findall(text.replace("\\_", "_"))
            if not tokens:
                raise AmbiguousCategory("no category token")
            polarity = polarity_from_category(tokens[-1])
        else:
            raise Unparseable(text, "no Conclusion field")
    except AmbiguousCategory as exc:
        raise Unparseable(text, str(exc)) from None
    return ParadigmResult(
        analysis=first.get("analysis", ""),
        rule=first.get("rule", ""),
        query_details=first.get("query", ""),
        conclusion=polarity,
        raw=text,
    )


# --------------------------------------------------------------------------
# accuracy


def percent(value: Fraction | float, decimals: int = 1) -> str:
    """Render a fraction as a percentage, rounding half up."""
    if isinstance(value, Fraction):
        dec = Decimal(value.numerator) * 100 / Decimal(value.denominator)
    else:
        dec = Decimal(repr(value)) * 100
    quantum = Decimal(1).scaleb(-decimals)
    return str(dec.quantize(quantum, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class AccuracyReport:
    correct: Mapping[Polarity, int]
    total: Mapping[Polarity, int]

    @property
    def n(self) -> int:
        return sum(self.total.values())

    @property
    def n_correct(self) -> int:
        return sum(self.correct.values())

    @property
    def overall(self) -> Fraction:
        return Fraction(self.n_correct, self.n)

    @property
    def by_polarity(self) -> dict[Polarity, Fraction]:
        return {p: Fraction(self.correct.get(p, 0), t) for p, t in self.total.items() if t}


def score_accuracy(records: Iterable[Any]) -> AccuracyReport:
    """Count correct records per query polarity.

    Records need ``correct`` and ``query_label``; unparseable records are
    simply incorrect, so the denominator is the full record count.
    """
    correct = {Polarity.POSITIVE: 0, Polarity.NEGATIVE: 0}
    total = {Polarity.POSITIVE: 0, Polarity.NEGATIVE: 0}
    for rec in records:
        total[rec.query_label] += 1
        correct[rec.query_label] += bool(rec.correct)
    if not sum(total.values()):
        raise EmptyInput("no records to score")
    return AccuracyReport(correct, total)


def score_by_category(
    records: Iterable[Any], episodes: Iterable[BongardEpisode] | Mapping[str, int]
) -> dict[int, AccuracyReport]:
    if isinstance(episodes, Mapping):
        category = dict(episodes)
    else:
        category = {ep.episode_id: ep.commonsense_id for ep in episodes}
    groups: dict[int, list[Any]] = {}
    for rec in records:
        cid = category.get(rec.episode_id)
        if cid is None:
            raise MissingCategory(f"episode {rec.episode_id} has no commonsense category")
        groups.setdefault(cid, []).append(rec)
    if not groups:
        raise EmptyInput("no records to score")
    return {cid: score_accuracy(groups[cid]) for cid in sorted(groups)}


def mean_of(fractions: Sequence[Fraction]) -> Fraction:
    if not fractions:
        raise EmptyInput("nothing to average")
    return sum(fractions, Fraction(0)) / len(fractions)


# --------------------------------------------------------------------------
# Winoground


@dataclass(frozen=True)
class WinogroundChoiceSet:
    """Four forced choices for one sample; ``None`` marks an unparseable reply.

    ``caption_for_d0`` is the caption index chosen for description 0, and so
    on; ``description_for_c1`` is the description index chosen for caption 1.
    """

    sample_id: str
    caption_for_d0: int | None
    caption_for_d1: int | None
    description_for_c0: int | None
    description_for_c1: int | None
    replies: Mapping[str, str] = field(default_factory=dict, compare=False)
    model_id: str = ""
    describer_model_id: str = ""

    @property
    def text_correct(self) -> bool:
        return self.caption_for_d0 == 0 and self.caption_for_d1 == 1

    @property
    def image_correct(self) -> bool:
        return self.description_for_c0 == 0 and self.description_for_c1 == 1

    @property
    def group_correct(self) -> bool:
        return self.text_correct and self.image_correct


@dataclass(frozen=True)
class WinogroundScores:
    text_score: Fraction
    image_score: Fraction
    group_score: Fraction
    per_sample: tuple[tuple[bool, bool, bool], ...]

    @property
    def n(self) -> int:
        return len(self.per_sample)


def winoground_scores(choice_sets: Sequence[WinogroundChoiceSet]) -> WinogroundScores:
    if not choice_sets:
        raise EmptyInput("no Winoground samples")
    bits = tuple((c.text_correct, c.image_correct, c.group_correct) for c in choice_sets)
    n = len(bits)
    return WinogroundScores(
        text_score=Fraction(sum(b[0] for b in bits), n),
        image_score=Fraction(sum(b[1] for b in bits), n),
        group_score=Fraction(sum(b[2] for b in bits), n),
        per_sample=bits,
    )


# --------------------------------------------------------------------------
# semantic similarity


def _as_array(v: Any) -> np.ndarray:
    values = getattr(v, "values", v)
    return np.asarray(values, dtype=np.float64)


def cosine_similarity(a: Any, b: Any) -> float:
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionMismatch(f"shapes {x.shape} and {y.shape}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


@dataclass(frozen=True)
class SimilarityPair:
    polarity: Polarity
    rule: str
    query_text: str
    episode_id: str = ""


def similarity_pairs(
    records: Iterable[Any],
    query_source: str = "drl",
    descriptions: Mapping[str, str] | None = None,
) -> list[SimilarityPair]:
    """Build (rule, query text) pairs from DRL records.

    ``query_source="drl"`` uses the Query Image field of the stage-2 reply;
    ``"ca"`` uses the stage-1 description document of the query image, looked
    up by content hash in ``descriptions``.
    """
    pairs = []
    for rec in records:
        if rec.rule is None or rec.result is None:
            continue
        if query_source == "drl":
            query_text = rec.result.query_details
        elif query_source == "ca":
            if descriptions is None:
                raise ValueError("query_source='ca' needs a descriptions mapping")
            query_text = descriptions[rec.query_hash]
        else:
            raise ValueError(f"unknown query_source {query_source!r}")
        if query_text:
            pairs.append(SimilarityPair(rec.query_label, rec.rule.text, query_text, rec.episode_id))
    return pairs


def semantic_similarity_report(
    pairs: Sequence[SimilarityPair], backend: Any, batch_size: int = 64
) -> dict[Polarity, tuple[float, float]]:
    """Mean and population standard deviation of rule/query cosine per polarity."""
    if not pairs:
        raise EmptyInput("no rule/query pairs")
    texts = [t for p in pairs for t in (p.rule, p.query_text)]
    vectors = []
    for i in range(0, len(texts), batch_size):
        vectors.extend(backend.embed(texts[i : i + batch_size]))
    cosines: dict[Polarity, list[float]] = {}
    for i, p in enumerate(pairs):
        cosines.setdefault(p.polarity, []).append(cosine_similarity(vectors[2 * i], vectors[2 * i + 1]))
    return {
        pol: (statistics.fmean(vals), statistics.pstdev(vals))
        for pol, vals in sorted(cosines.items(), key=lambda kv: kv[0].value, reverse=True)
    }
