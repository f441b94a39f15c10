"""Result tables, as aligned text or CSV.

Reports are pure functions of their inputs: the same records always give the
same bytes.
"""

from __future__ import annotations

import csv
import io
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any

from .analysis import (
    WinogroundChoiceSet,
    mean_of,
    percent,
    score_accuracy,
    score_by_category,
    winoground_scores,
)
from .domain import COMMONSENSE_CATEGORIES, HOI_SPLITS, BongardEpisode, Polarity
from .errors import EmptyInput, HarnessError, UnknownGrouping
from .paradigms import EvaluationRecord, Paradigm

GROUPINGS = ("paradigm", "hoi-split", "winoground", "category", "misclassified")
FORMATS = ("table-text", "csv")
DASH = "-"


@dataclass(frozen=True)
class Inapplicable:
    """A (model, paradigm) pair the backend could not run; shown as dashes."""

    model_id: str
    paradigm: Paradigm
    reason: str = ""


@dataclass(frozen=True)
class Table:
    title: str
    headers: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]
    note: str = ""

    def render(self, fmt: str = "table-text") -> str:
        if fmt == "csv":
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(self.headers)
            w.writerows(self.rows)
            return buf.getvalue()
        if fmt != "table-text":
            raise ValueError(f"unknown format {fmt!r}")
        widths = [max(len(r[i]) for r in (self.headers, *self.rows)) for i in range(len(self.headers))]

        def line(cells: Sequence[str]) -> str:
            out = [cells[0].ljust(widths[0])]
            out += [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
            return "  ".join(out).rstrip()

        parts = [self.title, line(self.headers), "  ".join("-" * w for w in widths)]
        parts += [line(r) for r in self.rows]
        if self.note:
            parts.append(self.note)
        return "\n".join(parts) + "\n"


def _model_label(rec: EvaluationRecord) -> str:
    if rec.describer_model_id and rec.describer_model_id != rec.model_id:
        return f"{rec.model_id} (desc: {rec.describer_model_id})"
    return rec.model_id


def _bongard(records: Iterable[Any]) -> list[EvaluationRecord]:
    return [r for r in records if isinstance(r, EvaluationRecord)]


def _episode_map(episodes: Any) -> dict[str, BongardEpisode]:
    if episodes is None:
        return {}
    if isinstance(episodes, Mapping):
        return dict(episodes)
    return {ep.episode_id: ep for ep in episodes}


def paradigm_table(records: Sequence[Any], inapplicable: Iterable[Inapplicable] = ()) -> Table:
    recs = _bongard(records)
    inapplicable = list(inapplicable)
    if not recs and not inapplicable:
        raise EmptyInput("no records to report")
    paradigms = sorted(
        {r.paradigm for r in recs} | {i.paradigm for i in inapplicable}, key=list(Paradigm).index
    )
    rows_order: list[str] = []
    cells: dict[tuple[str, Paradigm], list[EvaluationRecord]] = {}
    for r in recs:
        label = _model_label(r)
        if label not in rows_order:
            rows_order.append(label)
        cells.setdefault((label, r.paradigm), []).append(r)
    for i in inapplicable:
        if i.model_id not in rows_order:
            rows_order.append(i.model_id)
    dashed = {(i.model_id, i.paradigm) for i in inapplicable}

    headers = ["Model"]
    for p in paradigms:
        headers += [f"{p.value} neg", f"{p.value} pos", f"{p.value} Overall"]
    rows = []
    for label in rows_order:
        row = [label]
        for p in paradigms:
            group = cells.get((label, p))
            if group:
                rep = score_accuracy(group)
                by = rep.by_polarity
                row += [
                    percent(by[Polarity.NEGATIVE]) if Polarity.NEGATIVE in by else DASH,
                    percent(by[Polarity.POSITIVE]) if Polarity.POSITIVE in by else DASH,
                    percent(rep.overall),
                ]
            else:
                row += [DASH if (label, p) in dashed else ""] * 3
        rows.append(tuple(row))
    return Table(
        "Classification accuracy (%) by paradigm; '-' marks input-limit non-applicability",
        tuple(headers),
        tuple(rows),
    )


def hoi_table(
    records: Sequence[Any], episodes: Any = None, run_splits: Mapping[str, str] | None = None
) -> Table:
    recs = _bongard(records)
    if not recs:
        raise EmptyInput("no records to report")
    eps = _episode_map(episodes)
    run_splits = run_splits or {}
    groups: dict[tuple[str, str], dict[str, list[EvaluationRecord]]] = {}
    for r in recs:
        ep = eps.get(r.episode_id)
        split = ep.split if ep is not None and ep.split else run_splits.get(r.run_id)
        if split not in HOI_SPLITS:
            raise HarnessError(f"record {r.episode_id} has no HOI split")
        groups.setdefault((_model_label(r), r.paradigm.value), {}).setdefault(split, []).append(r)
    rows = []
    for (label, par), by_split in groups.items():
        accs = {s: score_accuracy(by_split[s]).overall for s in HOI_SPLITS if s in by_split}
        row = [label, par] + [percent(accs[s]) if s in accs else "" for s in HOI_SPLITS]
        row.append(percent(mean_of(list(accs.values()))))
        rows.append(tuple(row))
    return Table("Accuracy (%) per HOI split", ("Model", "Paradigm", *HOI_SPLITS, "Avg"), tuple(rows))


def winoground_table(records: Sequence[Any]) -> Table:
    sets = [r for r in records if isinstance(r, WinogroundChoiceSet)]
    if not sets:
        raise EmptyInput("no Winoground records")
    groups: dict[str, list[WinogroundChoiceSet]] = {}
    for s in sets:
        label = s.model_id or "CA"
        if s.describer_model_id and s.describer_model_id != s.model_id:
            label = f"{label} (desc: {s.describer_model_id})"
        groups.setdefault(label, []).append(s)
    rows = []
    for label, group in groups.items():
        sc = winoground_scores(group)
        rows.append((label, percent(sc.text_score, 2), percent(sc.image_score, 2), percent(sc.group_score, 2)))
    return Table(
        "Winoground scores (%)", ("Model", "Text Score", "Image Score", "Group Score"), tuple(rows)
    )


def category_table(records: Sequence[Any], episodes: Any) -> Table:
    recs = _bongard(records)
    if not recs:
        raise EmptyInput("no records to report")
    eps = _episode_map(episodes)
    mapping = {eid: ep.commonsense_id for eid, ep in eps.items() if ep.commonsense_id is not None}
    rows = []
    for cid, rep in score_by_category(recs, mapping).items():
        rows.append((str(cid), COMMONSENSE_CATEGORIES[cid], str(rep.n), percent(rep.overall, 2)))
    return Table("Accuracy (%) by commonsense category", ("ID", "Category", "N", "Accuracy"), tuple(rows))


def misclassified_table(records: Sequence[Any], episodes: Any = None) -> Table:
    recs = _bongard(records)
    if not recs:
        raise EmptyInput("no records to report")
    eps = _episode_map(episodes)
    rows = []
    for r in recs:
        if r.correct:
            continue
        ep = eps.get(r.episode_id)
        caption = (ep.rule_caption or "") if ep is not None else ""
        rule = r.rule.text if r.rule is not None else (r.result.rule if r.result is not None else "")
        got = r.result.conclusion.category if r.result is not None else "unparseable"
        rows.append((r.episode_id, _model_label(r), r.paradigm.value, caption, " ".join(rule.split()), got))
    return Table(
        "Misclassified cases",
        ("Episode", "Model", "Paradigm", "Ground-truth rule", "Model rule", "Predicted"),
        tuple(rows),
    )


def render_report(
    records: Sequence[Any],
    grouping: str = "paradigm",
    fmt: str = "table-text",
    *,
    episodes: Any = None,
    inapplicable: Iterable[Inapplicable] = (),
    run_splits: Mapping[str, str] | None = None,
) -> str:
    if grouping not in GROUPINGS:
        raise UnknownGrouping(f"unknown grouping {grouping!r}; choose from {', '.join(GROUPINGS)}")
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    inapplicable = list(inapplicable)
    if not records and not inapplicable:
        raise EmptyInput("empty record set")
    if grouping == "paradigm":
        table = paradigm_table(records, inapplicable)
    elif grouping == "hoi-split":
        table = hoi_table(records, episodes, run_splits)
    elif grouping == "winoground":
        table = winoground_table(records)
    elif grouping == "category":
        table = category_table(records, episodes)
    else:
        table = misclassified_table(records, episodes)
    return table.render(fmt)


def similarity_table(report: Mapping[Polarity, tuple[float, float]], query_source: str, fmt: str = "table-text") -> str:
    rows = tuple((p.short, f"{mean:.3f}", f"{std:.3f}") for p, (mean, std) in report.items())
    source = "DRL stage-2 Query Image field" if query_source == "drl" else "CA stage-1 description"
    return Table(
        "Rule/query cosine similarity", ("Query", "Mean", "Std (population)"), rows, f"query text: {source}"
    ).render(fmt)
