import pytest
from hypothesis import given
from hypothesis import strategies as st

from visreason.analysis import score_accuracy, winoground_scores
from visreason.backends import Capabilities, ScriptedBackend, fingerprint
from visreason.cache import DescriptionCache
from visreason.domain import Polarity
from visreason.errors import (
    CapabilityError,
    ChoiceParseError,
    EmptyRule,
    MissingDescription,
    SummaryExtractionError,
)
from visreason.paradigms import (
    CacheOnly,
    External,
    Model,
    Paradigm,
    SelfGenerated,
    check_applicable,
    extract_summary,
    parse_choice,
    run_ca,
    run_drl,
    run_dvrl,
    run_rule_application,
    run_winoground_ca,
)
from visreason.synthetic import (
    balanced_episodes,
    description_document,
    make_episode,
    make_winoground_sample,
    script_ca,
    script_describe,
    script_drl,
    script_dvrl,
    script_rule_apply,
    script_winoground,
    structured_reply,
)

POS, NEG = Polarity.POSITIVE, Polarity.NEGATIVE


class Recording(ScriptedBackend):
    """Scripted backend that keeps every request it sees."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.requests = []

    def _complete(self, request):
        self.requests.append(request)
        return super()._complete(request)


@pytest.fixture
def ep():
    return make_episode("e1", POS, caption="people riding bicycles")


def test_paradigm_parse():
    assert Paradigm.parse("rule-apply") is Paradigm.RULE_APPLY
    assert Paradigm.parse("DVRL") is Paradigm.DVRL
    with pytest.raises(ValueError):
        Paradigm.parse("zero-shot")


# --------------------------------------------------------------------------
# DVRL


def test_dvrl_correct(ep):
    b = Recording()
    script_dvrl(b, ep, "m", structured_reply(POS))
    rec = run_dvrl(ep, Model(b, "m"))
    assert rec.correct and rec.paradigm is Paradigm.DVRL and rec.result.conclusion is POS
    (req,) = b.requests
    images = req.messages[0].images
    assert [im.content_hash for im in images] == [im.content_hash for im in ep.images]
    assert len(images) == 13 and images[-1].content_hash == ep.query.content_hash


def test_dvrl_single_image_backend(ep):
    b = ScriptedBackend(capabilities=Capabilities(max_images=1))
    with pytest.raises(CapabilityError):
        run_dvrl(ep, Model(b, "m"))


def test_dvrl_garbage_reply(ep):
    b = ScriptedBackend()
    script_dvrl(b, ep, "m", "I like turtles.")
    rec = run_dvrl(ep, Model(b, "m"))
    assert rec.result is None and not rec.correct and "unparseable" in rec.flags
    assert rec.error is None


def test_dvrl_backend_failure_is_recorded(ep):
    rec = run_dvrl(ep, Model(ScriptedBackend(), "m"))
    assert rec.error and rec.error.startswith("ReplayMiss") and not rec.complete


def test_dvrl_minimal_variant_is_lenient(ep):
    b = ScriptedBackend()
    script_dvrl(b, ep, "m", "It belongs with the cat_2 images.", minimal=True)
    rec = run_dvrl(ep, Model(b, "m"), prompt_variant="minimal")
    assert rec.correct and "minimal_prompt" in rec.flags
    with pytest.raises(ValueError):
        run_dvrl(ep, Model(b, "m"), prompt_variant="fancy")


# --------------------------------------------------------------------------
# DRL


def test_drl_two_stages(ep):
    b = Recording()
    script_drl(b, ep, "m", "Looking at them...\n**Summary**: people riding bicycles", "people riding bicycles",
               structured_reply(POS, "people riding bicycles"))
    rec = run_drl(ep, Model(b, "m"))
    assert rec.correct and rec.rule.text == "people riding bicycles" and rec.rule.within_limit
    assert set(rec.raw_replies) == {"drl_extract", "drl_apply"}
    assert [r.image_count for r in b.requests] == [12, 1]
    assert rec.flags == ()


def test_drl_summary_fallback(ep):
    b = ScriptedBackend()
    stage1 = "Every cat_2 image shows cycling."
    script_drl(b, ep, "m", stage1, stage1, structured_reply(NEG))
    rec = run_drl(ep, Model(b, "m"))
    assert "summary_fallback" in rec.flags and rec.rule.text == stage1 and not rec.correct


def test_drl_long_rule_continues(ep):
    rule = " ".join(["word"] * 25)
    b = ScriptedBackend()
    script_drl(b, ep, "m", f"Summary: {rule}", rule, structured_reply(POS))
    rec = run_drl(ep, Model(b, "m"))
    assert rec.rule.word_count == 25 and not rec.rule.within_limit
    assert "rule_over_limit" in rec.flags and rec.correct


def test_drl_empty_summary(ep):
    b = ScriptedBackend()
    script_drl(b, ep, "m", "   ", "x", "unused")
    rec = run_drl(ep, Model(b, "m"))
    assert "empty_rule" in rec.flags and not rec.correct


@pytest.mark.parametrize(
    "reply, expected",
    [
        ("**Summary**: dogs at play", "dogs at play"),
        ("summary: a\nSUMMARY - final rule", "final rule"),
        ("### Summary of the rule:\nPeople cooking.", "People cooking."),
        ("Rule summary: `cats`", "cats"),
    ],
)
def test_extract_summary(reply, expected):
    assert extract_summary(reply) == expected


def test_extract_summary_errors():
    with pytest.raises(SummaryExtractionError):
        extract_summary("no marker")
    with pytest.raises(SummaryExtractionError):
        extract_summary("Summary: **")


# --------------------------------------------------------------------------
# rule application


def test_rule_apply_ground_truth(ep):
    b = Recording()
    script_rule_apply(b, ep, "m", ep.rule_caption, structured_reply(POS))
    rec = run_rule_application(ep, ep.rule_caption, Model(b, "m"))
    assert rec.correct and rec.paradigm is Paradigm.RULE_APPLY
    assert b.requests[0].image_count == 1


def test_rule_apply_confirmation_bias():
    eps = balanced_episodes(20)
    b = ScriptedBackend()
    for e in eps:
        script_rule_apply(b, e, "m", e.rule_caption, structured_reply(POS))
    rep = score_accuracy([run_rule_application(e, e.rule_caption, Model(b, "m")) for e in eps])
    assert rep.by_polarity[POS] == 1 and rep.by_polarity[NEG] == 0


def test_rule_apply_empty_rule(ep):
    with pytest.raises(EmptyRule):
        run_rule_application(ep, "  ", Model(ScriptedBackend(), "m"))


# --------------------------------------------------------------------------
# CA


def test_ca_external_descriptions_no_vision_calls(ep):
    docs = {im.content_hash: description_document(im.id) for im in ep.images}
    b = Recording(capabilities=Capabilities(vision=False, max_images=0))
    script_ca(b, ep, None, "reasoner", structured_reply(POS), documents=docs)
    rec = run_ca(ep, Model(b, "reasoner"), External(docs, "gpt-4o"))
    assert rec.correct and rec.describer_model_id == "gpt-4o" and rec.model_id == "reasoner"
    assert len(b.requests) == 1 and b.requests[0].image_count == 0


def test_ca_missing_external_description(ep):
    docs = {im.content_hash: description_document(im.id) for im in ep.images[:-1]}
    with pytest.raises(MissingDescription) as ei:
        run_ca(ep, Model(ScriptedBackend(), "r"), External(docs))
    assert str(ei.value) == ep.query.content_hash or ep.query.content_hash in str(ei.value)


def test_ca_describer_and_reasoner_ids(ep):
    describer_b, reasoner_b = ScriptedBackend(), Recording()
    docs = script_describe(describer_b, ep.images, "vision-a")
    script_ca(reasoner_b, ep, None, "text-b", structured_reply(POS), documents=docs)
    rec = run_ca(ep, Model(reasoner_b, "text-b"), SelfGenerated(Model(describer_b, "vision-a")))
    assert (rec.describer_model_id, rec.model_id) == ("vision-a", "text-b")
    assert rec.descriptions_used == tuple(im.content_hash for im in ep.images)
    assert all(r.image_count == 0 for r in reasoner_b.requests)


def test_ca_warm_cache_one_call_per_episode():
    eps = balanced_episodes(3)
    b = ScriptedBackend()
    for e in eps:
        script_ca(b, e, "m", "m", structured_reply(e.query_label))
    cache = DescriptionCache()
    model = Model(b, "m")
    first = [run_ca(e, model, SelfGenerated(model, cache)) for e in eps]
    assert sum(tag == "ca_describe" for tag, _ in b.calls) == 39
    b.calls.clear()
    second = [run_ca(e, model, SelfGenerated(model, cache)) for e in eps]
    assert [tag for tag, _ in b.calls] == ["ca_reason"] * 3
    assert [r.without_timing() for r in first] == [r.without_timing() for r in second]
    # cache-only source makes no describe calls at all
    b.calls.clear()
    run_ca(eps[0], model, CacheOnly(cache, "m"))
    assert [tag for tag, _ in b.calls] == ["ca_reason"]
    with pytest.raises(MissingDescription):
        run_ca(eps[0], model, CacheOnly(cache, "other"))


def test_ca_fenced_descriptions_are_stripped(ep):
    b = ScriptedBackend()
    fenced = script_describe(b, ep.images, "m", fenced=True)
    plain = {h: d.split("\n", 1)[1].rsplit("\n", 1)[0] for h, d in fenced.items()}
    script_ca(b, ep, None, "m", structured_reply(POS), documents=plain)
    rec = run_ca(ep, Model(b, "m"), SelfGenerated(Model(b, "m")))
    assert rec.correct and rec.flags == ()


def test_ca_schema_fallback_flag(ep):
    b = ScriptedBackend()
    docs = {}
    for im in ep.images:
        from visreason.backends import user_request
        from visreason.prompting import render_ca_describe

        docs[im.content_hash] = "just prose, no JSON"
        b.register_request(user_request("m", render_ca_describe(), (im,), tag="ca_describe"), "just prose, no JSON")
    script_ca(b, ep, None, "m", structured_reply(POS), documents=docs)
    rec = run_ca(ep, Model(b, "m"), SelfGenerated(Model(b, "m")))
    assert "description_schema_fallback" in rec.flags and rec.correct


# --------------------------------------------------------------------------
# determinism and the shared correctness predicate


@given(st.sampled_from(list(Polarity)), st.sampled_from(list(Polarity)), st.integers(0, 4))
def test_correctness_depends_only_on_conclusion_and_label(label, said, style):
    e = make_episode("p", label)
    b = ScriptedBackend()
    reply = structured_reply(said, style=style)
    script_dvrl(b, e, "m", reply)
    script_drl(b, e, "m", "Summary: r", "r", reply)
    script_ca(b, e, "m", "m", reply)
    model = Model(b, "m")
    recs = [run_dvrl(e, model), run_drl(e, model), run_ca(e, model, SelfGenerated(model))]
    assert {r.correct for r in recs} == {said is label}
    again = [run_dvrl(e, model), run_drl(e, model), run_ca(e, model, SelfGenerated(model))]
    assert [r.without_timing() for r in recs] == [r.without_timing() for r in again]


def test_request_tag_does_not_change_fingerprint(ep):
    from visreason.backends import user_request

    a = user_request("m", "hi", (ep.query,), tag="x")
    b = user_request("m", "hi", (ep.query,), tag="y")
    assert fingerprint(a) == fingerprint(b)


def test_check_applicable():
    one = Model(ScriptedBackend(capabilities=Capabilities(max_images=1)), "m")
    blind = Model(ScriptedBackend(capabilities=Capabilities(vision=False)), "t")
    check_applicable(Paradigm.RULE_APPLY, one)
    check_applicable(Paradigm.CA, blind)
    for p in (Paradigm.DVRL, Paradigm.DRL):
        with pytest.raises(CapabilityError):
            check_applicable(p, one)
    with pytest.raises(CapabilityError):
        check_applicable(Paradigm.RULE_APPLY, blind)
    check_applicable(Paradigm.DRL, Model(ScriptedBackend(capabilities=Capabilities(max_images=12)), "m"))


# --------------------------------------------------------------------------
# Winoground


@pytest.mark.parametrize(
    "reply, expected",
    [
        ("A", 0),
        ("**B**", 1),
        ("B.", 1),
        ("Answer: A", 0),
        ("(B) because the dog is chasing", 1),
        ("A) the first one", 0),
        ("The best match is: a dog chasing a cat", 0),
    ],
)
def test_parse_choice(reply, expected):
    assert parse_choice(reply, "a dog chasing a cat", "a cat chasing a dog") == expected


@pytest.mark.parametrize("reply", ["Both fit", "Neither", "a dog chasing a cat or a cat chasing a dog", ""])
def test_parse_choice_errors(reply):
    with pytest.raises(ChoiceParseError):
        parse_choice(reply, "a dog chasing a cat", "a cat chasing a dog")


def _wg_setup(replies):
    s = make_winoground_sample("w1")
    b = ScriptedBackend()
    docs = script_describe(b, (s.image_0, s.image_1), "desc")
    script_winoground(b, s, docs, "reasoner", replies)
    return s, b


def test_winoground_all_correct():
    s, b = _wg_setup(["A", "B", "A", "B"])
    cs = run_winoground_ca(s, Model(b, "desc"), Model(b, "reasoner"))
    assert (cs.caption_for_d0, cs.caption_for_d1, cs.description_for_c0, cs.description_for_c1) == (0, 1, 0, 1)
    assert cs.group_correct and (cs.model_id, cs.describer_model_id) == ("reasoner", "desc")
    assert len(cs.replies) == 4


def test_winoground_one_wrong():
    s, b = _wg_setup(["A", "B", "A", "A"])
    sc = winoground_scores([run_winoground_ca(s, Model(b, "desc"), Model(b, "reasoner"))])
    assert (sc.text_score, sc.image_score, sc.group_score) == (1, 0, 0)


def test_winoground_unparseable_counts_wrong():
    s, b = _wg_setup(["A", "Both fit", "A", "B"])
    cs = run_winoground_ca(s, Model(b, "desc"), Model(b, "reasoner"))
    assert cs.caption_for_d1 is None and not cs.text_correct and cs.image_correct


def test_concurrent_misses_describe_once(ep):
    from concurrent.futures import ThreadPoolExecutor

    from visreason.paradigms import fetch_description

    b = ScriptedBackend()
    script_describe(b, (ep.query,), "m")
    cache = DescriptionCache()
    with ThreadPoolExecutor(8) as pool:
        docs = list(pool.map(lambda _: fetch_description(ep.query, Model(b, "m"), cache), range(16)))
    assert len(set(docs)) == 1 and len(b.calls) == 1
