"""Builders shared by the test modules."""

from __future__ import annotations

import json
from pathlib import Path

from prodresearch.llm import CallableBackend, Gateway, Script, ScriptEntry, ScriptedBackend
from prodresearch.model import (
    Message,
    Persona,
    RawTrajectory,
    ResearchQuery,
    ResearchState,
    Role,
    Rubric,
    ToolCallRecord,
    TrajectoryStatus,
    normalize_rubric,
)
from prodresearch.templates import TemplateSet
from prodresearch.tools import FixtureWeb, ToolEnvironment, ingest_corpus

DEMO = Path(__file__).resolve().parents[1] / "src" / "prodresearch" / "data" / "demo"
GOLDEN = Path(__file__).resolve().parent / "golden"

RUBRIC_DOC = {
    "dimensions": {
        "comprehensiveness": {"weight": 3, "criteria": [
            {"name": "coverage", "explanation": "covers candidates", "weight": 2},
            {"name": "costs", "explanation": "covers running costs", "weight": 1}]},
        "insight": {"weight": 2, "criteria": [
            {"name": "tradeoffs", "explanation": "explains trade-offs", "weight": 1},
            {"name": "safety", "explanation": "explains safety", "weight": 1}]},
        "instruction_following": {"weight": 3, "criteria": [
            {"name": "budget", "explanation": "respects budget", "weight": 1},
            {"name": "fit", "explanation": "fits the room", "weight": 1}]},
        "readability": {"weight": 2, "criteria": [
            {"name": "table", "explanation": "uses a table", "weight": 1},
            {"name": "verdict", "explanation": "clear verdict", "weight": 3}]},
    }
}


def rubric() -> Rubric:
    return normalize_rubric(Rubric.from_dict(RUBRIC_DOC))


def query(qid: str = "q-1") -> ResearchQuery:
    return ResearchQuery(qid, "Which quiet ozone-free purifier under 200 suits a 15 m2 nursery, and why?", "u1")


def persona() -> Persona:
    return Persona("Careful first-time parent on a mid-range budget.")


def think(text: str = "thinking") -> str:
    return f"<think>{text}</think>"


def tool(name: str, arguments: dict, note: str = "next step") -> str:
    return think(note) + "\n<tool_call>\n" + json.dumps({"name": name, "arguments": arguments}) + "\n</tool_call>"


def answer(text: str = "Buy AP-2001.", note: str = "done") -> str:
    return think(note) + f"\n<answer>{text}</answer>"


def approve(reason: str = "ok") -> str:
    return f"<supervisor_response><approved>true</approved><feedback></feedback><reason>{reason}</reason></supervisor_response>"


def reject(feedback: str = "revise this", reason: str = "not good enough") -> str:
    return (f"<supervisor_response><approved>false</approved><feedback>{feedback}</feedback>"
            f"<reason>{reason}</reason></supervisor_response>")


EXTRACT = json.dumps({"rational": "r", "evidence": "quiet, 19 dB", "summary": "quiet"})

SEARCH = ("product_search", {"query": "HEPA purifier nursery"})


def scripted(**replies: list[str]) -> Gateway:
    """Gateway replaying per-agent reply lists in call order."""
    entries = [ScriptEntry(text, agent_tag=tag, sequence_index=i)
               for tag, texts in replies.items() for i, text in enumerate(texts)]
    return Gateway(ScriptedBackend(Script(entries)), sleep=lambda s: None)


def policy_gateway(fn) -> Gateway:
    return Gateway(CallableBackend(fn), sleep=lambda s: None)


def demo_env(gateway: Gateway) -> ToolEnvironment:
    return ToolEnvironment(ingest_corpus(DEMO / "corpus.jsonl"), FixtureWeb.load(DEMO / "web.jsonl"), gateway,
                           TemplateSet())


def raw_trajectory(segment_lengths: list[int], plain_steps: int = 1, qid: str = "q-1",
                   status: TrajectoryStatus = TrajectoryStatus.COMPLETED) -> RawTrajectory:
    """Synthetic raw trajectory: one feedback segment per entry of ``segment_lengths``
    (odd lengths: assistant, supervisor, assistant, ...), then ``plain_steps`` approved
    tool steps, then a final answer. Segment k ends on a tool call with distinct arguments."""
    msgs = [Message(Role.SYSTEM, "sys"), Message(Role.USER, query(qid).text)]
    n_calls = 0

    def add_tool_step(args: dict, revisions: int) -> None:
        nonlocal n_calls
        cid = f"call_{n_calls}"
        n_calls += 1
        for r in range(revisions):
            msgs.append(Message(Role.ASSISTANT, tool("product_search", {"query": f"draft {r}"}),
                                state_tag=ResearchState.TOOLCALL, round=r))
            msgs.append(Message(Role.SUPERVISOR, f"fix draft {r}", state_tag=ResearchState.TOOLCALL))
        msgs.append(Message(Role.ASSISTANT, tool("product_search", args),
                            (ToolCallRecord(cid, "product_search", args),), state_tag=ResearchState.TOOLCALL,
                            round=revisions))
        msgs.append(Message(Role.TOOL, "results", tool_call_id=cid, state_tag=ResearchState.TOOLCALL))

    msgs.append(Message(Role.ASSISTANT, think("plan"), state_tag=ResearchState.PLAN, round=0))
    for k, length in enumerate(segment_lengths):
        assert length >= 3 and length % 2 == 1
        add_tool_step({"query": f"segment {k}"}, (length - 1) // 2)
    for k in range(plain_steps):
        add_tool_step({"query": f"plain {k}"}, 0)
    msgs.append(Message(Role.ASSISTANT, answer("Final report AP-1001."), state_tag=ResearchState.REPORT, round=0))
    return RawTrajectory(f"traj-{qid}", query(qid), persona(), rubric(), tuple(msgs), status=status)


def trajectory_with_turns(n_assistant: int, qid: str = "q-1") -> RawTrajectory:
    """Completed trajectory with exactly ``n_assistant`` assistant messages (n >= 2)."""
    t = raw_trajectory([], plain_steps=n_assistant - 2, qid=qid)
    assert t.assistant_turns() == n_assistant
    return t


# (number, title, passed, detail) rows filled in by test_acceptance and printed by conftest
ACCEPTANCE: list[tuple[int, str, bool, str]] = []
