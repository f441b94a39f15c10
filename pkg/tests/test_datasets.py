import json
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visreason.datasets import (
    HoiSplit,
    build_openworld_subset,
    category_histogram,
    load_episode_manifest,
    load_external_descriptions,
    load_openworld_manifest,
    load_rules,
    load_winoground,
    rule_for,
    sample_hoi_split,
    select_ids,
    source_id,
)
from visreason.domain import Polarity
from visreason.errors import InsufficientPool, InsufficientSources, ManifestError
from visreason.synthetic import hoi_pool, make_episode, write_hoi_manifest, write_openworld_manifest


@pytest.fixture(scope="module")
def ow_sources(tmp_path_factory):
    root = tmp_path_factory.mktemp("ow")
    return load_openworld_manifest(write_openworld_manifest(root, 12, images=False))


def test_openworld_subset_shape(ow_sources):
    eps = build_openworld_subset(ow_sources, 10)
    assert len(eps) == 20
    assert Counter(e.query_label for e in eps) == {Polarity.POSITIVE: 10, Polarity.NEGATIVE: 10}
    first = eps[0]
    src = ow_sources[0]
    assert first.episode_id == f"{src.source_id}_pos_0"
    assert eps[1].episode_id == f"{src.source_id}_neg_0"
    assert first.positives == src.positives[:6] and first.negatives == src.negatives[:6]
    assert first.query == src.positives[6] and eps[1].query == src.negatives[6]
    assert first.commonsense_id == src.commonsense_id
    assert first.rule_caption == src.rule_caption


@given(st.integers(0, 12))
def test_openworld_subset_size_property(ow_sources, k):
    eps = build_openworld_subset(ow_sources, k)
    assert len(eps) == 2 * k
    assert len({e.episode_id for e in eps}) == 2 * k


def test_openworld_subset_too_large(ow_sources):
    with pytest.raises(InsufficientSources):
        build_openworld_subset(ow_sources, 13)


def test_openworld_manifest_errors(tmp_path):
    p = tmp_path / "m.jsonl"
    good = {"id": "a", "positives": ["x"] * 7, "negatives": ["y"] * 7, "commonsense": 0, "caption": "c"}
    p.write_text(json.dumps(good) + "\n" + json.dumps({**good, "positives": ["x"] * 6}) + "\n")
    with pytest.raises(ManifestError) as ei:
        load_openworld_manifest(p)
    assert ei.value.line == 2
    p.write_text(json.dumps(good) + "\n{oops\n")
    with pytest.raises(ManifestError, match="line 2"):
        load_openworld_manifest(p)
    p.write_text(json.dumps({**good, "commonsense": 10}) + "\n")
    with pytest.raises(ManifestError):
        load_openworld_manifest(p)


@pytest.fixture(scope="module")
def pool():
    return hoi_pool()


@pytest.mark.parametrize("split", list(HoiSplit))
def test_hoi_sampling_balanced_and_deterministic(pool, split):
    a = sample_hoi_split(split, pool, 100, seed=7)
    b = sample_hoi_split(split, pool, 100, seed=7)
    c = sample_hoi_split(split, pool, 100, seed=8)
    assert [e.episode_id for e in a] == [e.episode_id for e in b]
    assert [e.episode_id for e in a] != [e.episode_id for e in c]
    assert Counter(e.query_label for e in a) == {Polarity.POSITIVE: 50, Polarity.NEGATIVE: 50}
    assert all(e.split == split.value for e in a)
    assert len({e.episode_id for e in a}) == 100


@settings(max_examples=40)
@given(st.integers(0, 60).map(lambda x: 2 * x), st.integers(0, 2**32))
def test_hoi_sampling_property(pool, n, seed):
    eps = sample_hoi_split("uoua", pool, n, seed)
    labels = Counter(e.query_label for e in eps)
    assert labels[Polarity.POSITIVE] == labels[Polarity.NEGATIVE] == n // 2


def test_hoi_sampling_errors(pool):
    with pytest.raises(InsufficientPool):
        sample_hoi_split("uoua", pool, 200, 0)  # only 60 negatives
    with pytest.raises(ValueError):
        sample_hoi_split("sosa", pool, 11, 0)
    with pytest.raises(ValueError):
        sample_hoi_split("xxxx", pool, 10, 0)


def test_hoi_manifest_round_trip(tmp_path):
    path = write_hoi_manifest(tmp_path, {"soua": (3, 2)})
    eps = load_episode_manifest(path)
    assert len(eps) == 5
    assert {e.split for e in eps} == {"soua"}
    assert all(e.commonsense_id is None for e in eps)
    assert sum(e.query_label is Polarity.POSITIVE for e in eps) == 3


def test_winoground_loader(tmp_path):
    p = tmp_path / "wg.jsonl"
    p.write_text(
        json.dumps({"id": 0, "image_0": "a.png", "image_1": "b.png", "caption_0": "x", "caption_1": "y"}) + "\n"
    )
    (s,) = load_winoground(p)
    assert s.sample_id == "0" and s.caption_1 == "y"
    assert s.image_0.path.endswith("a.png")
    p.write_text(json.dumps({"id": 0, "image_0": "a.png"}) + "\n")
    with pytest.raises(ManifestError):
        load_winoground(p)


def test_category_histogram():
    eps = [make_episode(f"e{i}", Polarity.POSITIVE, commonsense_id=c) for i, c in enumerate([0, 0, 0, 3])]
    h = category_histogram(eps)
    assert h[0] == (3, Fraction(3, 4)) and h[3] == (1, Fraction(1, 4))


def test_select_ids_keeps_order_and_reports_missing():
    eps = [make_episode(f"e{i}", Polarity.POSITIVE) for i in range(4)]
    assert [e.episode_id for e in select_ids(eps, ["e3", "e1"])] == ["e3", "e1"]
    with pytest.raises(ManifestError):
        select_ids(eps, ["nope"])


def test_external_files(tmp_path):
    d = tmp_path / "d.jsonl"
    d.write_text(json.dumps({"content_hash": "abc", "document": "{}"}) + "\n")
    assert load_external_descriptions(d) == {"abc": "{}"}
    r = tmp_path / "r.jsonl"
    r.write_text(json.dumps({"episode_id": "ow1", "rule": "dogs"}) + "\n")
    rules = load_rules(r)
    assert rule_for(rules, make_episode("ow1_neg_0", Polarity.NEGATIVE)) == "dogs"
    assert source_id("ow1_pos_0") == "ow1" and source_id("sosa_3") == "sosa_3"
