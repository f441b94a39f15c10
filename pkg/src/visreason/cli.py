"""Command-line entry point: ``visreason {run,describe,score,report,prompts}``."""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from .analysis import (
    WinogroundChoiceSet,
    percent,
    score_accuracy,
    semantic_similarity_report,
    similarity_pairs,
    winoground_scores,
)
from .cache import DescriptionCache
from .datasets import (
    build_openworld_subset,
    load_episode_manifest,
    load_openworld_manifest,
    load_winoground,
)
from .domain import Polarity
from .errors import BackendError, HarnessError
from .paradigms import EvaluationRecord
from .prompting import dump_prompts
from .report import Inapplicable, category_table, render_report, similarity_table
from .runner import (
    EXIT_BACKEND,
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_PARTIAL,
    Harness,
    RunConfig,
    execute,
    load_items,
    prewarm,
)
from .runstore import RunStore, load_runs

log = logging.getLogger("visreason")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--runs-dir", default="runs", help="directory holding run folders (default: runs)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visreason", description="Visual rule-reasoning evaluation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="evaluate one model/paradigm on one dataset")
    _add_common(run)
    run.add_argument("--dataset", help="openworld | hoi:<split> | winoground")
    run.add_argument("--paradigm", default="ca", help="dvrl | drl | ca | rule-apply")
    run.add_argument("--model", help="provider:model, e.g. openai:gpt-4o or scripted:replies.jsonl#gpt-4o")
    run.add_argument("--manifest", help="dataset manifest (JSONL)")
    run.add_argument("--describer", help="model that writes CA descriptions (default: --model)")
    run.add_argument("--descriptions", help="JSONL file of external descriptions keyed by content_hash")
    run.add_argument("--rules", help="JSONL file of external rules for rule-apply")
    run.add_argument("--subset-k", type=int, default=250)
    run.add_argument("--n", type=int, default=100)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--ids", help="file listing episode ids to keep, one per line")
    run.add_argument("--prompt-variant", choices=("structured", "minimal"), default="structured")
    run.add_argument("--section-style", choices=("blocks", "pylist"), default="blocks")
    run.add_argument("--max-images", type=int, help="override the backend's per-request image limit")
    run.add_argument("--resume", metavar="RUN_ID", help="continue an existing run with its stored config")
    run.add_argument("--cache", help="description cache file (default: <runs-dir>/descriptions.jsonl)")
    run.add_argument("--workers", type=int, default=4)
    run.add_argument("--fsync", action="store_true", help="fsync after every record")

    desc = sub.add_parser("describe", help="pre-warm the description cache")
    _add_common(desc)
    desc.add_argument("--model", required=True)
    desc.add_argument("--manifest", required=True)
    desc.add_argument("--dataset", default="openworld", help="manifest kind: openworld | hoi | winoground")
    desc.add_argument("--cache")
    desc.add_argument("--workers", type=int, default=4)

    score = sub.add_parser("score", help="print accuracy for a run")
    _add_common(score)
    score.add_argument("--run", required=True)
    score.add_argument("--by-category", action="store_true")
    score.add_argument("--winoground", action="store_true")
    score.add_argument("--similarity", metavar="EMBED_MODEL", help="rule/query cosine report with this embedder")
    score.add_argument("--query-source", choices=("drl", "ca"), default="drl")
    score.add_argument("--cache")

    rep = sub.add_parser("report", help="render result tables")
    _add_common(rep)
    rep.add_argument("--run", required=True, action="append", help="run id; repeat to combine runs")
    rep.add_argument("--format", choices=("table-text", "csv"), default="table-text")
    rep.add_argument(
        "--grouping", choices=("paradigm", "hoi-split", "winoground", "category"), help="default: by dataset"
    )
    rep.add_argument("--misclassified", action="store_true", help="also list misclassified cases")

    prompts = sub.add_parser("prompts", help="write the canonical prompt texts to a directory")
    prompts.add_argument("--dump", required=True, metavar="DIR")
    prompts.add_argument("-v", "--verbose", action="store_true")
    return parser


def _cache(args: argparse.Namespace) -> DescriptionCache:
    return DescriptionCache(args.cache or Path(args.runs_dir) / "descriptions.jsonl")


def cmd_run(args: argparse.Namespace) -> int:
    if args.resume:
        store = RunStore.open(args.runs_dir, args.resume)
        config = RunConfig.from_snapshot(store.manifest().config)
    else:
        if not args.dataset or not args.model or not args.manifest:
            raise HarnessError("run needs --dataset, --model and --manifest (or --resume)")
        config = RunConfig(
            dataset=args.dataset,
            paradigm=args.paradigm,
            model=args.model,
            manifest=args.manifest,
            describer=args.describer,
            descriptions=args.descriptions,
            rules=args.rules,
            subset_k=args.subset_k,
            n=args.n,
            seed=args.seed,
            ids=args.ids,
            prompt_variant=args.prompt_variant,
            section_style=args.section_style,
            max_images=args.max_images,
        )
    outcome = execute(config, args.runs_dir, cache=_cache(args), workers=args.workers, fsync=args.fsync)
    print(f"run {outcome.run_id}")
    if outcome.inapplicable:
        print(f"not applicable: {outcome.inapplicable}")
    else:
        print(
            f"{outcome.completed} new, {outcome.skipped} already stored, "
            f"{len(outcome.failed)} failed, {outcome.total} total"
        )
    if outcome.exit_code == EXIT_PARTIAL:
        print(f"partial run; resume with: visreason run --resume {outcome.run_id} --runs-dir {args.runs_dir}")
    return outcome.exit_code


def _manifest_items(kind: str, manifest: str) -> list:
    kind = kind.partition(":")[0]
    if kind == "openworld":
        sources = load_openworld_manifest(manifest)
        return build_openworld_subset(sources, len(sources))
    if kind == "hoi":
        return load_episode_manifest(manifest)
    if kind == "winoground":
        return load_winoground(manifest)
    raise HarnessError(f"unknown dataset {kind!r}")


def cmd_describe(args: argparse.Namespace) -> int:
    harness = Harness(max_in_flight=args.workers)
    describer = harness.model(args.model)
    describer.require_images(1)
    cache = _cache(args)
    done, failures = prewarm(_manifest_items(args.dataset, args.manifest), describer, cache, args.workers)
    print(f"{done} image(s) described or cached; {cache.hits} cache hit(s); {len(failures)} failure(s)")
    for image_id, err in failures:
        print(f"  {image_id}: {err}", file=sys.stderr)
    if failures:
        return EXIT_PARTIAL if done else EXIT_BACKEND
    return EXIT_OK


def _episodes_for(config_snapshot: dict) -> list:
    try:
        return load_items(RunConfig.from_snapshot(config_snapshot))
    except (HarnessError, OSError) as exc:
        log.warning("episodes unavailable (%s); captions and categories omitted", exc)
        return []


def cmd_score(args: argparse.Namespace) -> int:
    store = RunStore.open(args.runs_dir, args.run)
    manifest = store.manifest()
    records = store.records()
    if manifest.inapplicable:
        print(f"{args.run}: not applicable ({manifest.inapplicable})")
        return EXIT_OK
    choice_sets = [r for r in records if isinstance(r, WinogroundChoiceSet)]
    if args.winoground or choice_sets:
        sc = winoground_scores(choice_sets)
        print(
            f"Winoground N={sc.n}: text {percent(sc.text_score, 2)}  "
            f"image {percent(sc.image_score, 2)}  group {percent(sc.group_score, 2)}"
        )
        return EXIT_OK
    recs = [r for r in records if isinstance(r, EvaluationRecord)]
    rep = score_accuracy(recs)
    by = rep.by_polarity
    cells = [
        f"{p.short} {percent(by[p])} ({rep.correct[p]}/{rep.total[p]})"
        for p in (Polarity.NEGATIVE, Polarity.POSITIVE)
        if p in by
    ]
    print(f"{args.run}: overall {percent(rep.overall)} ({rep.n_correct}/{rep.n}); " + "; ".join(cells))
    unparsed = sum(1 for r in recs if r.result is None)
    if unparsed:
        print(f"{unparsed} unparseable repl{'y' if unparsed == 1 else 'ies'} counted as incorrect")
    if args.by_category:
        print(category_table(recs, _episodes_for(manifest.config)).render())
    if args.similarity:
        backend_model = Harness().model(args.similarity)
        descriptions = None
        if args.query_source == "ca":
            cache = _cache(args)
            describer = manifest.config.get("describer") or manifest.config.get("model")
            descriptions = cache.documents(_model_id(describer))
        pairs = similarity_pairs(recs, args.query_source, descriptions)
        report = semantic_similarity_report(pairs, backend_model.backend)
        print(similarity_table(report, args.query_source))
    return EXIT_OK


def _model_id(spec: str | None) -> str:
    if not spec:
        return ""
    provider, _, model = spec.partition(":")
    if provider == "scripted":
        fixture, _, mid = model.partition("#")
        return mid or Path(fixture).stem
    return model


def cmd_report(args: argparse.Namespace) -> int:
    records, manifests = load_runs(args.runs_dir, args.run)
    inapplicable = [
        Inapplicable(_model_id(m.config.get("model")), RunConfig.from_snapshot(m.config).paradigm_enum, m.inapplicable)
        for m in manifests
        if m.inapplicable
    ]
    datasets = {m.config.get("dataset", "").partition(":")[0] for m in manifests}
    grouping = args.grouping
    if grouping is None:
        grouping = "winoground" if datasets == {"winoground"} else "hoi-split" if datasets == {"hoi"} else "paradigm"
    needs_episodes = grouping in ("category", "hoi-split") or args.misclassified
    episodes = []
    if needs_episodes:
        for m in manifests:
            episodes.extend(_episodes_for(m.config))
    run_splits = {m.run_id: m.config.get("dataset", "").partition(":")[2] for m in manifests}
    out = render_report(
        records, grouping, args.format, episodes=episodes, inapplicable=inapplicable, run_splits=run_splits
    )
    sys.stdout.write(out)
    if args.misclassified:
        sys.stdout.write("\n" + render_report(records, "misclassified", args.format, episodes=episodes))
    return EXIT_OK


def cmd_prompts(args: argparse.Namespace) -> int:
    for path in dump_prompts(args.dump):
        print(path)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "describe": cmd_describe, "score": cmd_score, "report": cmd_report, "prompts": cmd_prompts}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return COMMANDS[args.command](args)
    except BackendError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (HarnessError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
