"""Length filtering, reflective internalization, and SFT export."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .llm import Gateway, GatewayError, make_request
from .model import (
    Message,
    RawTrajectory,
    RefinedTrajectory,
    Role,
    TrajectoryStatus,
    dumps_line,
)
from .parsers import ParseError, parse_researcher, same_action
from .synthesis import render_history
from .templates import TemplateSet

logger = logging.getLogger(__name__)

DEFAULT_TAU = 7
MAX_REGENERATIONS = 2
CONTEXT_MESSAGES = 6
SFT_ROLES = (Role.SYSTEM, Role.USER, Role.ASSISTANT, Role.TOOL)


class MalformedInterleaving(ValueError):
    def __init__(self, index: int):
        super().__init__(f"supervisor message at {index} is not flanked by assistant messages")
        self.index = index


class SupervisorRoleLeak(ValueError):
    pass


@dataclass(frozen=True)
class FilterPolicy:
    """Minimum number of interaction turns, counted as assistant messages."""

    tau: int = DEFAULT_TAU
    turn_definition: str = "assistant_messages"

    def __post_init__(self) -> None:
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.turn_definition != "assistant_messages":
            raise ValueError(f"unsupported turn definition {self.turn_definition!r}")


def filter_by_length(t: RawTrajectory, policy: FilterPolicy) -> bool:
    if t.status is not TrajectoryStatus.COMPLETED:
        raise ValueError(f"only completed trajectories are filtered, got {t.status.value}")
    return t.assistant_turns() >= policy.tau


@dataclass(frozen=True)
class Segment:
    """Inclusive index range of an [assistant, supervisor, assistant, ...] run."""

    start_index: int
    end_index: int

    def __len__(self) -> int:
        return self.end_index - self.start_index + 1


def find_segments(messages) -> list[Segment]:
    msgs = list(getattr(messages, "messages", messages))
    segments: list[Segment] = []
    i = 0
    while i < len(msgs):
        if msgs[i].role is not Role.SUPERVISOR:
            i += 1
            continue
        if i == 0 or msgs[i - 1].role is not Role.ASSISTANT:
            raise MalformedInterleaving(i)
        start = i - 1
        while i < len(msgs) and msgs[i].role is Role.SUPERVISOR:
            if i + 1 >= len(msgs) or msgs[i + 1].role is not Role.ASSISTANT:
                raise MalformedInterleaving(i)
            i += 2
        segments.append(Segment(start, i - 1))
    return segments


@dataclass
class RefineStats:
    input_count: int = 0
    kept: int = 0
    dropped_by_length: int = 0
    dropped_failed: int = 0
    skipped_malformed: int = 0
    segments: int = 0
    fallback_segments: int = 0
    output_count: int = 0

    def to_dict(self) -> dict:
        fallback_rate = self.fallback_segments / self.segments if self.segments else 0.0
        return {
            "input_count": self.input_count,
            "kept": self.kept,
            "dropped_by_length": self.dropped_by_length,
            "dropped_failed": self.dropped_failed,
            "skipped_malformed": self.skipped_malformed,
            "segments": self.segments,
            "fallback_segments": self.fallback_segments,
            "fallback_rate": fallback_rate,
            "output_count": self.output_count,
        }


INTERNALIZER_SYSTEM_FALLBACK = "You are Latte, a deep research shopping assistant."


def _consolidate(question: str, context: list[Message], segment: list[Message], gateway: Gateway,
                 templates: TemplateSet, system_prompt: str) -> Message | None:
    final = segment[-1]
    target = parse_researcher(final.content, strict=False)
    prompt = templates.render(
        "internalizer",
        question=question,
        history_str=render_history(context),
        segment=render_history(segment),
    )
    wire = [Message(Role.SYSTEM, system_prompt), Message(Role.USER, prompt)]
    for attempt in range(MAX_REGENERATIONS + 1):
        text = gateway.complete(make_request("internalizer", wire)).text
        try:
            out = parse_researcher(text, strict=True)
            problem = None if same_action(out, target) else "the final action differs from the last revision"
        except ParseError as exc:
            problem = str(exc)
        if problem is None:
            return Message(Role.ASSISTANT, text, final.tool_calls, state_tag=final.state_tag)
        logger.info("internalizer attempt %d rejected: %s", attempt + 1, problem)
        wire = wire + [
            Message(Role.ASSISTANT, text),
            Message(Role.USER, f"Rejected: {problem}. Emit exactly the same final action as the last revision, "
                               "in the required output format."),
        ]
    return None


def internalize(t: RawTrajectory, gateway: Gateway, templates: TemplateSet | None = None) -> RefinedTrajectory:
    """Collapse every feedback segment into one self-contained assistant message."""
    templates = templates or TemplateSet()
    msgs = list(t.messages)
    approved_refs = [e.message_index for e in t.state_log if e.approved and e.message_index is not None]
    if approved_refs:
        raise ValueError(f"approval messages present at {approved_refs}")
    segments = find_segments(msgs)
    system_prompt = msgs[0].content if msgs and msgs[0].role is Role.SYSTEM else INTERNALIZER_SYSTEM_FALLBACK
    out: list[Message] = []
    fallbacks: list[int] = []
    pos = 0
    for k, seg in enumerate(segments):
        out.extend(msgs[pos:seg.start_index])
        block = msgs[seg.start_index:seg.end_index + 1]
        context = out[1:][-CONTEXT_MESSAGES:]
        try:
            merged = _consolidate(t.query.text, context, block, gateway, templates, system_prompt)
        except GatewayError as exc:
            logger.warning("internalizer unavailable for segment %d of %s: %s", k, t.trajectory_id, exc)
            merged = None
        if merged is None:
            fallbacks.append(k)
            final = block[-1]
            merged = Message(Role.ASSISTANT, final.content, final.tool_calls, state_tag=final.state_tag)
        out.append(merged)
        pos = seg.end_index + 1
    out.extend(msgs[pos:])
    return RefinedTrajectory(
        query=t.query,
        persona=t.persona,
        rubric=t.rubric,
        messages=tuple(out),
        provenance={
            "raw_trajectory_id": t.trajectory_id,
            "consolidation_count": len(segments),
            "fallback_used": fallbacks,
            "source_run": t.provenance.get("run_id", ""),
        },
    )


def validate_refined(rt: RefinedTrajectory) -> list[str]:
    problems = []
    msgs = rt.messages
    if len(msgs) < 3 or msgs[0].role is not Role.SYSTEM or msgs[1].role is not Role.USER:
        problems.append("must start with system, user")
    for i, m in enumerate(msgs[2:], start=2):
        if m.role not in (Role.ASSISTANT, Role.TOOL):
            problems.append(f"unexpected {m.role.value} message at {i}")
        elif m.role is Role.TOOL and msgs[i - 1].role not in (Role.ASSISTANT, Role.TOOL):
            problems.append(f"tool message at {i} does not follow an assistant turn")
    if not msgs or msgs[-1].role is not Role.ASSISTANT:
        problems.append("last message is not an assistant turn")
    else:
        try:
            if parse_researcher(msgs[-1].content, strict=False).answer is None:
                problems.append("last message has no answer block")
        except ParseError:
            problems.append("last message does not parse")
    return problems


def sft_record(rt: RefinedTrajectory) -> dict:
    leaked = [i for i, m in enumerate(rt.messages) if m.role not in SFT_ROLES]
    if leaked:
        raise SupervisorRoleLeak(f"non-SFT roles at message indices {leaked}")
    return {
        "messages": [{"role": m.role.value, "content": m.content} for m in rt.messages],
        "meta": {
            "query_id": rt.query.query_id,
            "assistant_turns": rt.assistant_turns(),
            "source_run": rt.provenance.get("source_run", ""),
        },
    }


def export_sft(trajectories: RefinedTrajectory | Iterable[RefinedTrajectory], path: str | Path) -> int:
    """Write chat records, one per line. Refuses the whole batch on a role leak."""
    if isinstance(trajectories, RefinedTrajectory):
        trajectories = [trajectories]
    records = [sft_record(rt) for rt in trajectories]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_line(rec) + "\n")
    return len(records)


@dataclass
class RefineResult:
    refined: list[RefinedTrajectory] = field(default_factory=list)
    stats: RefineStats = field(default_factory=RefineStats)


def refine_batch(raws: Iterable[RawTrajectory], policy: FilterPolicy, gateway: Gateway,
                 templates: TemplateSet | None = None) -> RefineResult:
    templates = templates or TemplateSet()
    result = RefineResult()
    st = result.stats
    for t in raws:
        st.input_count += 1
        if t.status is not TrajectoryStatus.COMPLETED:
            st.dropped_failed += 1
            continue
        if not filter_by_length(t, policy):
            st.dropped_by_length += 1
            continue
        st.kept += 1
        try:
            rt = internalize(t, gateway, templates)
        except (MalformedInterleaving, ValueError) as exc:
            logger.warning("trajectory %s not refinable: %s", t.trajectory_id, exc)
            st.skipped_malformed += 1
            continue
        st.segments += rt.provenance["consolidation_count"]
        st.fallback_segments += len(rt.provenance["fallback_used"])
        result.refined.append(rt)
    st.output_count = len(result.refined)
    return result
