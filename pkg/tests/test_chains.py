from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from isa_harness.backend import PermanentRejection, ScriptedMock
from isa_harness.chains import (
    CALLS_PER_INSTANCE,
    ChainError,
    ChainKind,
    ChainTrace,
    MissingPlaceholder,
    PromptTemplate,
    TemplateError,
    TemplateSet,
    default_templates,
    load_template_set,
    render,
    run_chain,
    run_direct,
    run_saot,
    run_thor,
)

from .conftest import ALL_RULES, PHRASE, SAOT_RULES, THOR_RULES, FailingMock, make_instance

TEMPLATES = default_templates()


def test_render_substitutes():
    t = PromptTemplate("t", "Given '{sentence}', what about {target}?")
    out = render(t, {"sentence": "Try the dumplings", "target": "dumplings"})
    assert out == "Given 'Try the dumplings', what about dumplings?"


def test_render_without_placeholders_is_verbatim():
    assert render(PromptTemplate("t", "plain text"), {}) == "plain text"


def test_render_missing_value():
    with pytest.raises(MissingPlaceholder) as info:
        render(PromptTemplate("t", "use {analysis}"), {"sentence": "s"})
    assert info.value.name == "analysis"


def test_unknown_placeholder_rejected_at_load(tmp_path):
    with pytest.raises(TemplateError, match="mood"):
        PromptTemplate("t", "{sentence} {mood}")
    (tmp_path / "direct.txt").write_text("{sentence} {hop1}")
    with pytest.raises(TemplateError, match="hop1"):
        load_template_set(tmp_path)


@given(st.text(max_size=30), st.text(max_size=30))
def test_render_is_single_pass(sentence, target):
    t = PromptTemplate("t", "[{sentence}|{target}]")
    assert render(t, {"sentence": sentence, "target": target}) == f"[{sentence}|{target}]"


def test_render_does_not_expand_placeholders_inside_values():
    t = PromptTemplate("t", "{sentence}")
    assert render(t, {"sentence": "{target}", "target": "X"}) == "{target}"


def test_default_templates_phrases_are_distinct():
    # Both reflect variants share a phrase so one mock rule serves either mode.
    for name, phrase in PHRASE.items():
        owners = {n for n, t in TEMPLATES.templates.items() if phrase in t.body}
        expected = {name, "saot_reflect_independent"} if name == "saot_reflect" else {name}
        assert owners == expected, (name, owners)


def test_template_fingerprint_changes_with_body():
    bodies = {n: t.body for n, t in TEMPLATES.templates.items()}
    bodies["direct"] += " "
    assert TemplateSet.from_dict(bodies).fingerprint() != TEMPLATES.fingerprint()


# ---------------------------------------------------------------- direct


def test_direct_single_step():
    mock = ScriptedMock([(PHRASE["direct"], "positive")])
    inst = make_instance()
    trace = run_direct(mock, TEMPLATES, inst)
    assert len(trace.steps) == 1 and trace.final_text == "positive"
    assert inst.text in trace.steps[0].prompt
    assert mock.calls == 1


def test_direct_error_carries_instance_id():
    class Rejecting:
        def complete(self, req):
            raise PermanentRejection(400, "bad")

    with pytest.raises(ChainError) as info:
        run_direct(Rejecting(), TEMPLATES, make_instance("r42"))
    assert info.value.instance_id == "r42"
    assert isinstance(info.value.cause, PermanentRejection)
    assert "r42" in str(info.value)


# ------------------------------------------------------------------ thor


def test_thor_three_hops_feed_forward():
    mock = ScriptedMock(THOR_RULES)
    trace = run_thor(mock, TEMPLATES, make_instance())
    assert [s.step_name for s in trace.steps] == ["aspect", "opinion", "polarity"]
    assert [s.response for s in trace.steps] == ["the waiting time", "the author is unhappy with it", "negative"]
    assert "the waiting time" in trace.steps[1].prompt
    assert "the waiting time" in trace.steps[2].prompt
    assert "the author is unhappy with it" in trace.steps[2].prompt
    assert mock.calls == 3 and trace.final_text == "negative"


def test_thor_hop1_failure_stops_chain():
    mock = FailingMock(THOR_RULES, fail_on=[PHRASE["thor_aspect"]])
    with pytest.raises(ChainError) as info:
        run_thor(mock, TEMPLATES, make_instance())
    assert mock.calls == 1
    assert info.value.trace.steps == []


def test_thor_hop2_failure_keeps_partial_trace():
    mock = FailingMock(THOR_RULES, fail_on=[PHRASE["thor_opinion"]])
    with pytest.raises(ChainError) as info:
        run_thor(mock, TEMPLATES, make_instance())
    assert [s.step_name for s in info.value.trace.steps] == ["aspect"]
    assert mock.calls == 2


# ------------------------------------------------------------------ saot


def test_saot_scripted_flow():
    mock = ScriptedMock(SAOT_RULES)
    trace = run_saot(mock, TEMPLATES, make_instance())
    assert [s.step_name for s in trace.steps] == ["analyze", "reflect", "infer"]
    assert [s.response for s in trace.steps] == ["service quality implied", "analysis is sound", "The polarity is positive."]
    infer_prompt = trace.steps[2].prompt
    assert "service quality implied" in infer_prompt and "analysis is sound" in infer_prompt
    assert infer_prompt.index("service quality implied") < infer_prompt.index("analysis is sound")
    assert mock.calls == 3


def test_saot_reflect_sees_analysis_by_default():
    trace = run_saot(ScriptedMock(SAOT_RULES), TEMPLATES, make_instance())
    assert "service quality implied" in trace.steps[1].prompt


def test_saot_independent_reflect_hides_analysis():
    mock = ScriptedMock(SAOT_RULES)
    trace = run_saot(mock, TEMPLATES, make_instance(), independent_reflect=True)
    assert "service quality implied" not in trace.steps[1].prompt
    assert "analysis is sound" in trace.steps[2].prompt and "service quality implied" in trace.steps[2].prompt
    assert mock.calls == 3


@pytest.mark.parametrize("kind", list(ChainKind))
def test_call_count_law(kind):
    mock = ScriptedMock(ALL_RULES)
    trace = run_chain(kind, mock, TEMPLATES, make_instance())
    assert mock.calls == CALLS_PER_INSTANCE[kind] == len(trace.steps)
    assert trace.final_text == trace.steps[-1].response


@given(
    text=st.text(min_size=1, max_size=40),
    target=st.text(max_size=10),
    kind=st.sampled_from(list(ChainKind)),
)
def test_trace_is_pure_function_of_instance(text, target, kind):
    inst = make_instance(text=text, target=target)
    a = run_chain(kind, ScriptedMock(ALL_RULES), TEMPLATES, inst)
    b = run_chain(kind, ScriptedMock(ALL_RULES), TEMPLATES, inst)
    assert a == b
    assert ChainTrace.from_dict(a.to_dict()) == a
