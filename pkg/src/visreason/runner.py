"""Batch orchestration behind the CLI: load a subset, run it, persist records."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .backends import Backend, make_backend
from .cache import DescriptionCache
from .datasets import (
    build_openworld_subset,
    load_episode_manifest,
    load_external_descriptions,
    load_openworld_manifest,
    load_rules,
    load_winoground,
    read_id_list,
    rule_for,
    sample_hoi_split,
    select_ids,
)
from .domain import HOI_SPLITS, BongardEpisode, ImageRef, WinogroundSample
from .errors import BackendError, CapabilityError, HarnessError, MissingDescription
from .paradigms import (
    DescriptionSource,
    External,
    Model,
    Paradigm,
    SelfGenerated,
    check_applicable,
    fetch_description,
    run_ca,
    run_drl,
    run_dvrl,
    run_rule_application,
    run_winoground_ca,
)
from .prompting import TemplateId, template_hash
from .runstore import RunStatus, RunStore, resume_run

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_PARTIAL = 4

BackendFactory = Callable[..., "tuple[Backend, str]"]


class ConfigError(HarnessError):
    pass


@dataclass(frozen=True)
class RunConfig:
    dataset: str  # openworld | hoi:<split> | winoground
    paradigm: str  # dvrl | drl | ca | rule-apply
    model: str  # provider:model
    manifest: str
    describer: str | None = None
    descriptions: str | None = None
    rules: str | None = None
    subset_k: int = 250
    n: int = 100
    seed: int = 0
    ids: str | None = None
    prompt_variant: str = "structured"
    section_style: str = "blocks"
    max_images: int | None = None

    def __post_init__(self) -> None:
        kind, _, split = self.dataset.partition(":")
        if kind not in ("openworld", "hoi", "winoground"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if kind == "hoi" and split not in HOI_SPLITS:
            raise ConfigError(f"dataset hoi needs a split, one of {', '.join(HOI_SPLITS)}")
        try:
            paradigm = Paradigm.parse(self.paradigm)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if kind == "winoground" and paradigm is not Paradigm.CA:
            raise ConfigError("winoground is only evaluated with the ca paradigm")
        if paradigm is Paradigm.RULE_APPLY and not self.rules:
            raise ConfigError("rule-apply needs --rules")
        if self.describer and self.descriptions:
            raise ConfigError("--describer and --descriptions are mutually exclusive")

    @property
    def paradigm_enum(self) -> Paradigm:
        return Paradigm.parse(self.paradigm)

    def snapshot(self) -> dict[str, Any]:
        d = asdict(self)
        d["paradigm"] = self.paradigm_enum.value
        for p in ("manifest", "descriptions", "rules", "ids"):
            if d[p]:
                d[p] = str(Path(d[p]).resolve())
        used = {
            Paradigm.DVRL: [TemplateId.DVRL_MINIMAL if self.prompt_variant == "minimal" else TemplateId.DVRL],
            Paradigm.DRL: [TemplateId.DRL_EXTRACT, TemplateId.DRL_APPLY],
            Paradigm.CA: [TemplateId.CA_DESCRIBE, TemplateId.CA_REASON],
            Paradigm.RULE_APPLY: [TemplateId.DRL_APPLY],
        }[self.paradigm_enum]
        if self.dataset == "winoground":
            used = [TemplateId.CA_DESCRIBE, TemplateId.WG_CAPTION_CHOICE, TemplateId.WG_IMAGE_CHOICE]
        d["templates"] = {t.value: template_hash(t) for t in used}
        return d

    @classmethod
    def from_snapshot(cls, snap: dict[str, Any]) -> RunConfig:
        fields = {k: v for k, v in snap.items() if k in cls.__dataclass_fields__}
        return cls(**fields)


def load_items(config: RunConfig) -> list[Any]:
    """Episodes (or Winoground samples) for ``config``, in evaluation order."""
    kind, _, split = config.dataset.partition(":")
    if kind == "openworld":
        items: list[Any] = build_openworld_subset(load_openworld_manifest(config.manifest), config.subset_k)
    elif kind == "hoi":
        items = sample_hoi_split(split, load_episode_manifest(config.manifest), config.n, config.seed)
    else:
        items = load_winoground(config.manifest)
    if config.ids:
        key = "sample_id" if kind == "winoground" else "episode_id"
        items = select_ids(items, read_id_list(config.ids), key=key)
    return items


def unique_images(items: Sequence[Any]) -> list[ImageRef]:
    seen: dict[str, ImageRef] = {}
    for it in items:
        images = (it.image_0, it.image_1) if isinstance(it, WinogroundSample) else it.images
        for im in images:
            seen.setdefault(im.content_hash, im)
    return list(seen.values())


@dataclass
class RunOutcome:
    run_id: str
    total: int
    skipped: int = 0
    completed: int = 0
    failed: list[tuple[str, str]] = field(default_factory=list)
    inapplicable: str | None = None

    @property
    def exit_code(self) -> int:
        if self.inapplicable:
            return EXIT_CONFIG
        if not self.failed:
            return EXIT_OK
        return EXIT_PARTIAL if self.completed or self.skipped else EXIT_BACKEND


class Harness:
    """Resolves backends once per spec so models sharing a provider share limits."""

    def __init__(self, factory: BackendFactory = make_backend, max_in_flight: int = 4):
        self.factory = factory
        self.max_in_flight = max_in_flight
        self._backends: dict[tuple[str, int | None], tuple[Backend, str]] = {}

    def model(self, spec: str, max_images: int | None = None) -> Model:
        key = (spec, max_images)
        if key not in self._backends:
            try:
                self._backends[key] = self.factory(spec, max_images=max_images, max_in_flight=self.max_in_flight)
            except (ValueError, OSError) as exc:
                raise ConfigError(f"cannot set up backend {spec!r}: {exc}") from None
        backend, model_id = self._backends[key]
        return Model(backend, model_id)


def _description_source(
    config: RunConfig, harness: Harness, reasoner_spec: str, cache: DescriptionCache
) -> DescriptionSource:
    if config.descriptions:
        return External(load_external_descriptions(config.descriptions), describer_id=Path(config.descriptions).stem)
    describer = harness.model(config.describer or reasoner_spec, config.max_images)
    describer.require_images(1)
    return SelfGenerated(describer, cache)


def execute(
    config: RunConfig,
    runs_dir: str | Path,
    cache: DescriptionCache | None = None,
    workers: int = 4,
    harness: Harness | None = None,
    fsync: bool = False,
    stop_after: int | None = None,
) -> RunOutcome:
    """Run (or resume) ``config``. Records with backend failures are not stored,
    so a later invocation picks those episodes up again.

    ``stop_after`` ends the run after that many new records, which is how
    tests simulate a crash.
    """
    harness = harness or Harness(max_in_flight=workers)
    cache = cache if cache is not None else DescriptionCache(Path(runs_dir) / "descriptions.jsonl")
    items = load_items(config)
    store = RunStore.create(runs_dir, config.snapshot(), fsync=fsync)
    outcome = RunOutcome(store.run_id, total=len(items))
    with store:
        remaining = resume_run(store, items)
        outcome.skipped = len(items) - len(remaining)
        if stop_after is not None:
            remaining = remaining[:stop_after]

        model = harness.model(config.model, config.max_images)
        paradigm = config.paradigm_enum
        try:
            if config.dataset != "winoground":
                check_applicable(paradigm, model)
            task = _task_for(config, harness, model, paradigm, cache, remaining)
        except CapabilityError as exc:
            store.set_status(RunStatus.ABORTED, inapplicable=str(exc))
            outcome.inapplicable = str(exc)
            return outcome
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            futures = {pool.submit(task, it): it for it in remaining}
            for fut in as_completed(futures):
                it = futures[fut]
                item_id = getattr(it, "episode_id", None) or it.sample_id
                try:
                    rec = fut.result()
                except BackendError as exc:
                    outcome.failed.append((item_id, f"{type(exc).__name__}: {exc}"))
                    continue
                if getattr(rec, "error", None):
                    outcome.failed.append((item_id, rec.error))
                    continue
                store.append_record(rec)
                outcome.completed += 1

        done = outcome.skipped + outcome.completed
        store.set_status(RunStatus.COMPLETE if done == len(items) else RunStatus.IN_PROGRESS)
    for item_id, err in outcome.failed:
        logger.warning("%s: %s", item_id, err)
    return outcome


def _task_for(
    config: RunConfig,
    harness: Harness,
    model: Model,
    paradigm: Paradigm,
    cache: DescriptionCache,
    items: Sequence[Any],
) -> Callable[[Any], Any]:
    if config.dataset == "winoground":
        source = _description_source(config, harness, config.model, cache)
        _check_coverage(source, items)
        return lambda s: run_winoground_ca(s, source, model)
    if paradigm is Paradigm.DVRL:
        return lambda ep: run_dvrl(ep, model, config.prompt_variant)
    if paradigm is Paradigm.DRL:
        return lambda ep: run_drl(ep, model)
    if paradigm is Paradigm.RULE_APPLY:
        assert config.rules
        rules = load_rules(config.rules)
        missing = [ep.episode_id for ep in items if rule_for(rules, ep) is None]
        if missing:
            raise ConfigError(f"{len(missing)} episode(s) have no rule, e.g. {missing[0]}")
        return lambda ep: run_rule_application(ep, rule_for(rules, ep) or "", model)
    source = _description_source(config, harness, config.model, cache)
    _check_coverage(source, items)
    return lambda ep: run_ca(ep, model, source, section_style=config.section_style)


def _check_coverage(source: DescriptionSource, items: Sequence[Any]) -> None:
    if not isinstance(source, External):
        return
    for im in unique_images(items):
        if im.content_hash not in source.documents:
            raise MissingDescription(im.content_hash)


def prewarm(
    items: Sequence[BongardEpisode | WinogroundSample],
    describer: Model,
    cache: DescriptionCache,
    workers: int = 4,
) -> tuple[int, list[tuple[str, str]]]:
    """Describe every distinct image once. Returns (described, failures)."""
    images = unique_images(items)
    failures: list[tuple[str, str]] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {pool.submit(fetch_description, im, describer, cache): im for im in images}
        for fut in as_completed(futures):
            try:
                fut.result()
            except BackendError as exc:
                failures.append((futures[fut].id, f"{type(exc).__name__}: {exc}"))
    return len(images) - len(failures), failures
