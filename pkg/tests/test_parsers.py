from __future__ import annotations

import json
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prodresearch.model import Phase, SupervisorVerdict, ToolCallRecord
from prodresearch.parsers import (
    ActionKind,
    BothActionsPresent,
    ExtractorResult,
    ExtraneousContent,
    MalformedToolCallJson,
    MissingField,
    MissingTag,
    MissingThink,
    NotJson,
    ParseError,
    ResearcherOutput,
    UnknownToolName,
    UnparsableApproved,
    parse_extractor,
    parse_researcher,
    parse_supervisor,
    render_extractor,
    render_researcher,
    render_supervisor,
    same_action,
)
from prodresearch.templates import TemplateSet

# Output skeletons exactly as the researcher system prompt prints them. The
# tool-call skeleton has placeholder slots; concrete values go into the slots.
PLAN_TEMPLATE = "<think>Your thoughts and plan</think>"
TOOL_TEMPLATE = ("<think>Your thoughts and reasoning</think> \n<tool_call> \n"
                 '{"name": <function-name>, "arguments": <args-json-object>}\n</tool_call> ')
ANSWER_TEMPLATE = "<think>Your thoughts and reasoning</think> \n<answer>Your final answer</answer> "
EXTRACTOR_TEMPLATE = '{"rational": "...", "evidence": "...", "summary": "..."}'


def test_researcher_templates_present_in_prompt():
    text = TemplateSet()["researcher_system"].text
    assert PLAN_TEMPLATE in text
    assert "<answer>Your final answer</answer>" in text
    assert '{"name": <function-name>, "arguments": <args-json-object>}' in text


def test_plan_template():
    out = parse_researcher(PLAN_TEMPLATE)
    assert out.kind is ActionKind.PLAN_ONLY and out.think == "Your thoughts and plan"


def test_tool_template_with_slots_filled():
    text = TOOL_TEMPLATE.replace("<function-name>", '"product_search"').replace(
        "<args-json-object>", '{"query": "ssd"}')
    out = parse_researcher(text)
    assert out.kind is ActionKind.TOOL_CALL
    assert out.tool_call.tool_name == "product_search" and out.tool_call.arguments == {"query": "ssd"}


def test_tool_template_unfilled_is_malformed():
    with pytest.raises(MalformedToolCallJson):
        parse_researcher(TOOL_TEMPLATE)


def test_answer_template():
    out = parse_researcher(ANSWER_TEMPLATE)
    assert out.kind is ActionKind.ANSWER and out.answer == "Your final answer"


def test_compact_tool_example():
    out = parse_researcher('<think>t</think><tool_call>{"name":"product_search","arguments":{"query":"ssd"}}</tool_call>')
    assert out.tool_call == ToolCallRecord("call_0", "product_search", {"query": "ssd"})


def supervisor_blocks() -> list[tuple[str, str]]:
    ts = TemplateSet()
    out = []
    for tid in ("supervisor_system", "plan_eval", "toolcall_eval", "final_answer_gate", "final_report_eval"):
        m = re.search(r"<supervisor_response>.*?</supervisor_response>", ts[tid].text, re.DOTALL)
        assert m, tid
        out.append((tid, m.group(0)))
    return out


@pytest.mark.parametrize("tid,block", supervisor_blocks())
def test_supervisor_format_blocks_parse(tid, block):
    v = parse_supervisor(block, Phase.CHECK_PLAN)
    assert v.approved is True and v.feedback.strip() and v.reason.strip()


def test_supervisor_examples():
    v = parse_supervisor("<supervisor_response><approved>true</approved><feedback>ok</feedback>"
                         "<reason>fine</reason></supervisor_response>", Phase.CHECK_TOOLCALL)
    assert (v.approved, v.feedback, v.reason, v.phase) == (True, "ok", "fine", Phase.CHECK_TOOLCALL)
    chatty = ("Sure, here is my evaluation of the plan.\n\n<supervisor_response>\n<approved> FALSE </approved>\n"
              "<feedback>Add a budget check.</feedback>\n<reason>Incomplete.</reason>\n</supervisor_response>\n"
              "Let me know if you need more.")
    v = parse_supervisor(chatty, Phase.CHECK_PLAN)
    assert v.approved is False and v.feedback == "Add a budget check." and v.reason == "Incomplete."


def test_extractor_template_and_fence():
    assert parse_extractor(EXTRACTOR_TEMPLATE) == ExtractorResult("...", "...", "...")
    bare = '{"rational":"r","evidence":"e","summary":"s","extra":1}'
    assert parse_extractor(bare) == ExtractorResult("r", "e", "s")
    assert parse_extractor(f"```json\n{bare}\n```") == parse_extractor(bare)
    assert parse_extractor('{"rationale":"r","evidence":"e","summary":"s"}').rational == "r"


def test_extractor_prompt_names_the_three_fields():
    text = TemplateSet()["extractor"].text
    assert all(f'"{f}"' in text for f in ("rational", "evidence", "summary"))


MALFORMED = [
    ("researcher", "", MissingThink),
    ("researcher", "no tags at all", MissingThink),
    ("researcher", "<think></think>", MissingThink),
    ("researcher", "<think>   </think><answer>x</answer>", MissingThink),
    ("researcher", '<think>t</think><tool_call>{"name":"web_search","arguments":{"queries":["a"]}}</tool_call>'
                   "<answer>x</answer>", BothActionsPresent),
    ("researcher", "<think>t</think><tool_call>{not json}</tool_call>", MalformedToolCallJson),
    ("researcher", '<think>t</think><tool_call>{"name":"web_search"}</tool_call>', MalformedToolCallJson),
    ("researcher", '<think>t</think><tool_call>{"name":"web_search","arguments":{"queries":"a"}}</tool_call>',
     MalformedToolCallJson),
    ("researcher", '<think>t</think><tool_call>{"name":"rm_rf","arguments":{}}</tool_call>', UnknownToolName),
    ("researcher", "Here you go: <think>t</think><answer>x</answer>", ExtraneousContent),
    ("researcher", "<think>t</think><answer>x</answer> trailing", ExtraneousContent),
    ("researcher", "<think>a</think><think>b</think>", ExtraneousContent),
    ("supervisor", "approved", MissingTag),
    ("supervisor", "<supervisor_response><feedback>f</feedback><reason>r</reason></supervisor_response>", MissingTag),
    ("supervisor", "<supervisor_response><approved>maybe</approved><feedback>f</feedback><reason>r</reason>"
                   "</supervisor_response>", UnparsableApproved),
    ("supervisor", "<supervisor_response><approved>false</approved><feedback> </feedback><reason>r</reason>"
                   "</supervisor_response>", MissingTag),
    ("supervisor", "<supervisor_response><approved>true</approved><feedback>f</feedback></supervisor_response>",
     MissingTag),
    ("extractor", "not json", NotJson),
    ("extractor", '{"evidence":"e","summary":"s"}', MissingField),
    ("extractor", '["rational","evidence","summary"]', NotJson),
]


def run_parser(kind: str, text: str):
    if kind == "researcher":
        return parse_researcher(text)
    if kind == "supervisor":
        return parse_supervisor(text, Phase.CHECK_PLAN)
    return parse_extractor(text)


@pytest.mark.parametrize("kind,text,err", MALFORMED)
def test_malformed_corpus(kind, text, err):
    with pytest.raises(err):
        run_parser(kind, text)


def test_malformed_corpus_size():
    assert len(MALFORMED) == 20


def test_unparsable_approved_carries_value():
    with pytest.raises(UnparsableApproved) as exc:
        parse_supervisor("<supervisor_response><approved>maybe</approved><feedback>f</feedback><reason>r</reason>"
                         "</supervisor_response>", Phase.CHECK_PLAN)
    assert exc.value.value == "maybe"


def test_missing_field_names_field():
    with pytest.raises(MissingField) as exc:
        parse_extractor('{"evidence":"e","summary":"s"}')
    assert exc.value.name == "rational"


def test_lenient_mode_ignores_prose():
    out = parse_researcher("Sure! <think>t</think><answer>x</answer> bye", strict=False)
    assert out.answer == "x"


# -- generated round trips ---------------------------------------------------

safe_text = st.text(alphabet=st.characters(blacklist_characters="<>", blacklist_categories=("Cs",)), min_size=1,
                    max_size=60).filter(lambda s: s.strip() == s and s)
json_str = st.text(max_size=20, alphabet=st.characters(blacklist_categories=("Cs",)))

tool_calls = st.one_of(
    st.builds(lambda q, s, p: ("product_search", {"query": q, **({"shop_id": s} if s else {}),
                                                  **({"price": p} if p else {})}),
              json_str, st.one_of(st.none(), json_str), st.one_of(st.none(), st.just("10-20"))),
    st.builds(lambda qs: ("web_search", {"queries": qs}), st.lists(json_str, min_size=1, max_size=3)),
    st.builds(lambda us, g: ("web_visit", {"urls": us, "goal": g}), st.lists(json_str, max_size=3), json_str),
    st.builds(lambda ids, g: ("view_product_details", {"product_ids": ids, "goal": g}),
              st.lists(json_str, min_size=1, max_size=3), json_str),
)


@st.composite
def researcher_outputs(draw):
    think = draw(safe_text)
    kind = draw(st.sampled_from(list(ActionKind)))
    if kind is ActionKind.TOOL_CALL:
        name, args = draw(tool_calls)
        return ResearcherOutput(think, kind, tool_call=ToolCallRecord("call_0", name, args))
    if kind is ActionKind.ANSWER:
        return ResearcherOutput(think, kind, answer=draw(safe_text))
    return ResearcherOutput(think, kind)


@given(researcher_outputs())
@settings(max_examples=500)
def test_researcher_roundtrip(out):
    assert parse_researcher(render_researcher(out)) == out


@given(st.booleans(), safe_text, st.text(alphabet=st.characters(blacklist_characters="<>",
                                                                blacklist_categories=("Cs",)), max_size=40),
       st.sampled_from(list(Phase)))
@settings(max_examples=500)
def test_supervisor_roundtrip(approved, feedback, reason, phase):
    v = SupervisorVerdict(approved, feedback, reason, phase)
    assert parse_supervisor(render_supervisor(v), phase) == v


@given(json_str, json_str, json_str)
@settings(max_examples=500)
def test_extractor_roundtrip(r, e, s):
    res = ExtractorResult(r, e, s)
    assert parse_extractor(render_extractor(res)) == res


@given(researcher_outputs(), researcher_outputs())
@settings(max_examples=200)
def test_same_action_reflexive_and_kind_sensitive(a, b):
    assert same_action(a, a)
    if a.kind is not b.kind:
        assert not same_action(a, b)


@given(st.text(max_size=200))
@settings(max_examples=300)
def test_parsers_are_total(text):
    for kind in ("researcher", "supervisor", "extractor"):
        try:
            run_parser(kind, text)
        except ParseError:
            pass


@given(st.lists(st.sampled_from(["<think>", "</think>", "<tool_call>", "</tool_call>", "<answer>", "</answer>",
                                 "x", " ", '{"name":"web_search","arguments":{"queries":["q"]}}']), max_size=12))
@settings(max_examples=300)
def test_researcher_total_on_tag_soup(parts):
    try:
        parse_researcher("".join(parts))
    except ParseError:
        pass


def test_json_dump_of_non_string_extractor_fields():
    res = parse_extractor(json.dumps({"rational": "r", "evidence": ["a", "b"], "summary": {"k": 1}}))
    assert res.evidence == '["a", "b"]' and res.summary == '{"k": 1}'
