"""Strict parsers for the three structured agent output formats.

* researcher: ``<think>`` plus at most one ``<tool_call>`` or ``<answer>``
* supervisor: ``<supervisor_response>`` XML with approved/feedback/reason
* extractor: a JSON object with rational/evidence/summary
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Any

from .model import (
    InvalidToolArguments,
    Phase,
    SupervisorVerdict,
    ToolCallRecord,
    TOOL_SCHEMAS,
    canonical_json,
)


class ParseError(ValueError):
    """Base for every typed parse failure."""


class MissingThink(ParseError):
    pass


class BothActionsPresent(ParseError):
    pass


class MalformedToolCallJson(ParseError):
    def __init__(self, detail: str):
        super().__init__(f"malformed tool call: {detail}")
        self.detail = detail


class UnknownToolName(ParseError):
    def __init__(self, name: Any):
        super().__init__(f"unknown tool name {name!r}")
        self.name = name


class ExtraneousContent(ParseError):
    def __init__(self, content: str):
        super().__init__(f"content outside recognized tags: {content[:80]!r}")
        self.content = content


class MissingTag(ParseError):
    def __init__(self, tag_name: str, detail: str = "absent"):
        super().__init__(f"<{tag_name}> {detail}")
        self.tag_name = tag_name


class UnparsableApproved(ParseError):
    def __init__(self, value: str):
        super().__init__(f"approved must be true/false, got {value!r}")
        self.value = value


class NotJson(ParseError):
    pass


class MissingField(ParseError):
    def __init__(self, name: str):
        super().__init__(f"missing field {name!r}")
        self.name = name


# ---------------------------------------------------------------------------
# researcher


class ActionKind(str, Enum):
    PLAN_ONLY = "plan_only"
    TOOL_CALL = "tool_call"
    ANSWER = "answer"


@dataclass(frozen=True)
class ResearcherOutput:
    think: str
    kind: ActionKind
    tool_call: ToolCallRecord | None = None
    answer: str | None = None

    def __post_init__(self) -> None:
        if not self.think:
            raise ValueError("think must be non-empty")
        if (self.kind is ActionKind.TOOL_CALL) != (self.tool_call is not None):
            raise ValueError("tool_call must be set exactly for TOOL_CALL outputs")
        if (self.kind is ActionKind.ANSWER) != (self.answer is not None):
            raise ValueError("answer must be set exactly for ANSWER outputs")


def _tag_re(tag: str) -> re.Pattern[str]:
    return re.compile(rf"<{tag}>(.*?)</{tag}>", re.DOTALL)


_THINK = _tag_re("think")
_TOOL_CALL = _tag_re("tool_call")
_ANSWER = _tag_re("answer")


def parse_researcher(text: str, *, strict: bool = True, call_id: str = "call_0") -> ResearcherOutput:
    spans: list[tuple[int, int]] = []

    think_m = _THINK.search(text)
    if think_m is None:
        raise MissingThink("no <think>...</think> block")
    think = think_m.group(1).strip()
    if not think:
        raise MissingThink("empty <think> block")
    spans.append(think_m.span())

    tool_m = _TOOL_CALL.search(text, think_m.end())
    answer_m = _ANSWER.search(text, think_m.end())
    if tool_m and answer_m:
        raise BothActionsPresent("both <tool_call> and <answer> present")

    if strict:
        if tool_m:
            spans.append(tool_m.span())
        if answer_m:
            spans.append(answer_m.span())
        rest, pos = [], 0
        for start, end in sorted(spans):
            rest.append(text[pos:start])
            pos = end
        rest.append(text[pos:])
        leftover = "".join(rest).strip()
        if leftover:
            raise ExtraneousContent(leftover)

    if tool_m:
        return ResearcherOutput(think, ActionKind.TOOL_CALL, tool_call=_parse_tool_call(tool_m.group(1), call_id))
    if answer_m:
        return ResearcherOutput(think, ActionKind.ANSWER, answer=answer_m.group(1).strip())
    return ResearcherOutput(think, ActionKind.PLAN_ONLY)


def _parse_tool_call(body: str, call_id: str) -> ToolCallRecord:
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as exc:
        raise MalformedToolCallJson(f"not JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise MalformedToolCallJson("tool call must be a JSON object")
    if "name" not in doc or "arguments" not in doc:
        raise MalformedToolCallJson('tool call needs "name" and "arguments"')
    name, args = doc["name"], doc["arguments"]
    if not isinstance(name, str) or name not in TOOL_SCHEMAS:
        raise UnknownToolName(name)
    if not isinstance(args, dict):
        raise MalformedToolCallJson('"arguments" must be a JSON object')
    try:
        return ToolCallRecord(call_id, name, args)
    except InvalidToolArguments as exc:
        raise MalformedToolCallJson(str(exc)) from None


def render_researcher(out: ResearcherOutput) -> str:
    """Canonical tag form of a researcher output."""
    parts = [f"<think>{out.think}</think>"]
    if out.kind is ActionKind.TOOL_CALL:
        assert out.tool_call is not None
        body = json.dumps({"name": out.tool_call.tool_name, "arguments": out.tool_call.arguments}, ensure_ascii=False)
        parts.append(f"<tool_call>\n{body}\n</tool_call>")
    elif out.kind is ActionKind.ANSWER:
        parts.append(f"<answer>{out.answer}</answer>")
    return "\n".join(parts)


def same_action(a: ResearcherOutput, b: ResearcherOutput) -> bool:
    """Same action kind and, for tool calls, same tool and canonical arguments."""
    if a.kind is not b.kind:
        return False
    if a.kind is ActionKind.TOOL_CALL:
        assert a.tool_call is not None and b.tool_call is not None
        return (
            a.tool_call.tool_name == b.tool_call.tool_name
            and canonical_json(a.tool_call.arguments) == canonical_json(b.tool_call.arguments)
        )
    return True


# ---------------------------------------------------------------------------
# supervisor

_SUPERVISOR = _tag_re("supervisor_response")
_APPROVED = _tag_re("approved")
_FEEDBACK = _tag_re("feedback")
_REASON = _tag_re("reason")


def parse_supervisor(text: str, phase: Phase) -> SupervisorVerdict:
    outer = _SUPERVISOR.search(text)
    if outer is None:
        raise MissingTag("supervisor_response")
    body = outer.group(1)
    fields = {}
    for name, pattern in (("approved", _APPROVED), ("feedback", _FEEDBACK), ("reason", _REASON)):
        m = pattern.search(body)
        if m is None:
            raise MissingTag(name)
        fields[name] = m.group(1)
    flag = fields["approved"].strip().lower()
    if flag not in ("true", "false"):
        raise UnparsableApproved(fields["approved"].strip())
    approved = flag == "true"
    if not approved and not fields["feedback"].strip():
        raise MissingTag("feedback", "is empty on a rejection")
    return SupervisorVerdict(approved, fields["feedback"], fields["reason"], phase)


def render_supervisor(verdict: SupervisorVerdict) -> str:
    return (
        "<supervisor_response>\n"
        f"<approved>{'true' if verdict.approved else 'false'}</approved>\n"
        f"<feedback>{verdict.feedback}</feedback>\n"
        f"<reason>{verdict.reason}</reason>\n"
        "</supervisor_response>"
    )


# ---------------------------------------------------------------------------
# extractor / generic JSON replies

_FENCE = re.compile(r"^```[A-Za-z0-9_-]*\s*(.*?)\s*```$", re.DOTALL)


@dataclass(frozen=True)
class ExtractorResult:
    rational: str
    evidence: str
    summary: str


EMPTY_EXTRACT = ExtractorResult("", "", "")


def load_json_reply(text: str) -> Any:
    """Decode a bare JSON document or one inside a fenced code block."""
    stripped = text.strip()
    m = _FENCE.match(stripped)
    if m:
        stripped = m.group(1).strip()
    try:
        return json.loads(stripped)
    except json.JSONDecodeError as exc:
        raise NotJson(f"reply is not JSON: {exc.msg}") from None


def _as_text(value: Any) -> str:
    return value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)


def parse_extractor(text: str) -> ExtractorResult:
    doc = load_json_reply(text)
    if not isinstance(doc, dict):
        raise NotJson("reply is not a JSON object")
    if "rational" in doc:
        rational = doc["rational"]
    elif "rationale" in doc:
        rational = doc["rationale"]
    else:
        raise MissingField("rational")
    for name in ("evidence", "summary"):
        if name not in doc:
            raise MissingField(name)
    return ExtractorResult(_as_text(rational), _as_text(doc["evidence"]), _as_text(doc["summary"]))


def render_extractor(result: ExtractorResult) -> str:
    return json.dumps(
        {"rational": result.rational, "evidence": result.evidence, "summary": result.summary}, ensure_ascii=False
    )
