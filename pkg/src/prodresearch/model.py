"""Shared domain types, validation, and the on-disk record schemas."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum
from typing import Any, Iterable, Iterator, Mapping

import jsonschema

SCHEMA_VERSION = 1

DIMENSIONS = ("comprehensiveness", "depth", "instruction_following", "readability")
DIMENSION_ALIASES = {"insight": "depth"}


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"
    TOOL = "tool"
    SUPERVISOR = "supervisor"


class ResearchState(str, Enum):
    PLAN = "Plan"
    TOOLCALL = "Toolcall"
    REPORT = "Report"


# (from, to) pairs; None as target means the session is done.
LEGAL_TRANSITIONS = frozenset(
    {
        (ResearchState.PLAN, ResearchState.PLAN),
        (ResearchState.PLAN, ResearchState.TOOLCALL),
        (ResearchState.TOOLCALL, ResearchState.TOOLCALL),
        (ResearchState.TOOLCALL, ResearchState.REPORT),
        (ResearchState.REPORT, ResearchState.REPORT),
        (ResearchState.REPORT, None),
    }
)


class Phase(str, Enum):
    CHECK_PLAN = "CheckPlan"
    CHECK_TOOLCALL = "CheckToolcall"
    FINAL_ANSWER_GATE = "FinalAnswerGate"
    CHECK_REPORT = "CheckReport"


class TrajectoryStatus(str, Enum):
    COMPLETED = "completed"
    FAILED_REVISION_CAP = "failed_revision_cap"
    FAILED_STEP_CAP = "failed_step_cap"
    FAILED_PARSE = "failed_parse"


class ValidationError(ValueError):
    """A value violates a domain invariant at construction time."""


class AllZeroWeights(ValidationError):
    def __init__(self, level: str):
        super().__init__(f"all weights are zero at level {level!r}")
        self.level = level


class DimensionMissing(ValidationError):
    def __init__(self, name: str):
        super().__init__(f"rubric dimension missing: {name}")
        self.name = name


# Parameter schemas as advertised to the research agent.
TOOL_SCHEMAS: dict[str, dict[str, Any]] = {
    "web_search": {
        "type": "object",
        "properties": {"queries": {"type": "array", "items": {"type": "string"}}},
        "required": ["queries"],
    },
    "web_visit": {
        "type": "object",
        "properties": {
            "urls": {"type": "array", "items": {"type": "string"}},
            "goal": {"type": "string"},
        },
        "required": ["urls", "goal"],
    },
    "product_search": {
        "type": "object",
        "properties": {
            "query": {"type": "string"},
            "shop_id": {"type": "string"},
            "price": {"type": "string"},
        },
        "required": ["query"],
    },
    "view_product_details": {
        "type": "object",
        "properties": {
            "product_ids": {"type": "array", "items": {"type": "string"}},
            "goal": {"type": "string"},
        },
        "required": ["product_ids", "goal"],
    },
}
TOOL_NAMES = tuple(TOOL_SCHEMAS)


class UnknownTool(ValidationError):
    def __init__(self, name: str):
        super().__init__(f"unknown tool: {name!r}")
        self.name = name


class InvalidToolArguments(ValidationError):
    pass


def canonical_json(value: Any) -> str:
    """Key-sorted compact JSON; the byte form used for equality and digests."""
    return json.dumps(value, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


@dataclass(frozen=True)
class ToolCallRecord:
    call_id: str
    tool_name: str
    arguments: dict[str, Any]

    def __post_init__(self) -> None:
        schema = TOOL_SCHEMAS.get(self.tool_name)
        if schema is None:
            raise UnknownTool(self.tool_name)
        if not isinstance(self.arguments, dict):
            raise InvalidToolArguments("arguments must be an object")
        try:
            jsonschema.validate(self.arguments, schema)
        except jsonschema.ValidationError as exc:
            raise InvalidToolArguments(f"{self.tool_name}: {exc.message}") from None

    def canonical_arguments(self) -> str:
        return canonical_json(self.arguments)

    def to_dict(self) -> dict[str, Any]:
        return {"call_id": self.call_id, "tool_name": self.tool_name, "arguments": self.arguments}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ToolCallRecord:
        return cls(d["call_id"], d["tool_name"], dict(d["arguments"]))


@dataclass(frozen=True)
class Message:
    role: Role
    content: str
    tool_calls: tuple[ToolCallRecord, ...] = ()
    tool_call_id: str | None = None
    state_tag: ResearchState | None = None
    round: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "tool_calls", tuple(self.tool_calls))
        if self.state_tag is not None:
            object.__setattr__(self, "state_tag", ResearchState(self.state_tag))
        if self.role is Role.ASSISTANT:
            if len(self.tool_calls) > 1:
                raise ValidationError("assistant message carries more than one tool call")
        elif self.tool_calls:
            raise ValidationError(f"{self.role.value} message cannot carry tool calls")
        if self.role is Role.TOOL and not self.tool_call_id:
            raise ValidationError("tool message requires tool_call_id")
        if self.role is not Role.TOOL and self.tool_call_id is not None:
            raise ValidationError("tool_call_id is only valid on tool messages")
        if self.round is not None and self.round < 0:
            raise ValidationError("round must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"role": self.role.value, "content": self.content}
        if self.tool_calls:
            d["tool_calls"] = [tc.to_dict() for tc in self.tool_calls]
        if self.tool_call_id is not None:
            d["tool_call_id"] = self.tool_call_id
        if self.state_tag is not None:
            d["state_tag"] = self.state_tag.value
        if self.round is not None:
            d["round"] = self.round
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Message:
        return cls(
            role=Role(d["role"]),
            content=d["content"],
            tool_calls=tuple(ToolCallRecord.from_dict(tc) for tc in d.get("tool_calls", ())),
            tool_call_id=d.get("tool_call_id"),
            state_tag=ResearchState(d["state_tag"]) if d.get("state_tag") else None,
            round=d.get("round"),
        )


@dataclass(frozen=True)
class Persona:
    profile_text: str
    facets: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.profile_text.strip():
            raise ValidationError("persona profile_text is empty")

    def to_dict(self) -> dict[str, Any]:
        return {"profile_text": self.profile_text, "facets": self.facets}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Persona:
        return cls(d["profile_text"], dict(d.get("facets", {})))


@dataclass(frozen=True)
class ResearchQuery:
    query_id: str
    text: str
    source_user_id: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValidationError("query text is empty")

    def to_dict(self) -> dict[str, Any]:
        return {"query_id": self.query_id, "text": self.text, "source_user_id": self.source_user_id}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ResearchQuery:
        return cls(d["query_id"], d["text"], d["source_user_id"])


EVENT_KINDS = ("purchase", "review", "dialogue")


@dataclass(frozen=True)
class BehaviorEvent:
    kind: str
    timestamp: str
    payload: str

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValidationError(f"unknown event kind {self.kind!r}")
        _parse_timestamp(self.timestamp)


def _parse_timestamp(ts: str) -> datetime:
    try:
        return datetime.fromisoformat(ts)
    except (TypeError, ValueError):
        raise ValidationError(f"bad timestamp {ts!r}") from None


@dataclass(frozen=True)
class BehaviorLog:
    user_id: str
    events: tuple[BehaviorEvent, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "events", tuple(self.events))
        stamps = [_parse_timestamp(e.timestamp) for e in self.events]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise ValidationError(f"events for user {self.user_id} are not time-ordered")

    def to_dict(self) -> dict[str, Any]:
        return {
            "user_id": self.user_id,
            "events": [{"kind": e.kind, "timestamp": e.timestamp, "payload": e.payload} for e in self.events],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> BehaviorLog:
        return cls(d["user_id"], tuple(BehaviorEvent(**e) for e in d.get("events", ())))


@dataclass(frozen=True)
class Criterion:
    name: str
    explanation: str
    weight: float

    def __post_init__(self) -> None:
        if not isinstance(self.weight, (int, float)) or not math.isfinite(self.weight) or self.weight < 0:
            raise ValidationError(f"criterion {self.name!r} has invalid weight {self.weight!r}")


@dataclass(frozen=True)
class Dimension:
    weight: float
    criteria: tuple[Criterion, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "criteria", tuple(self.criteria))
        if not self.criteria:
            raise ValidationError("dimension has no criteria")
        if not isinstance(self.weight, (int, float)) or not math.isfinite(self.weight) or self.weight < 0:
            raise ValidationError(f"invalid dimension weight {self.weight!r}")


@dataclass(frozen=True)
class Rubric:
    """Four weighted dimensions of weighted criteria.

    ``raw_weights`` keeps the weights exactly as generated (before any
    normalization) in the rubric-file layout, so the supervisor can be shown
    the original scale and normalization can always restart from it.
    """

    dimensions: dict[str, Dimension]
    raw_weights: dict[str, Any] | None = None

    def __post_init__(self) -> None:
        dims = dict(self.dimensions)
        for name in DIMENSIONS:
            if name not in dims:
                raise DimensionMissing(name)
        extra = set(dims) - set(DIMENSIONS)
        if extra:
            raise ValidationError(f"unexpected rubric dimensions: {sorted(extra)}")
        object.__setattr__(self, "dimensions", {name: dims[name] for name in DIMENSIONS})

    def dimension_weights(self) -> tuple[float, ...]:
        return tuple(self.dimensions[d].weight for d in DIMENSIONS)

    def weights_snapshot(self) -> dict[str, Any]:
        return {
            d: {"weight": dim.weight, "criteria": [c.weight for c in dim.criteria]}
            for d, dim in self.dimensions.items()
        }

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "dimensions": {
                name: {
                    "weight": dim.weight,
                    "criteria": [
                        {"name": c.name, "explanation": c.explanation, "weight": c.weight} for c in dim.criteria
                    ],
                }
                for name, dim in self.dimensions.items()
            }
        }
        if self.raw_weights is not None:
            d["raw_weights"] = self.raw_weights
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Rubric:
        """Load the rubric-file layout; ``insight`` is accepted for ``depth``
        and ``criterion`` for a criterion's ``name``."""
        raw_dims = d.get("dimensions", d)
        if not isinstance(raw_dims, Mapping):
            raise ValidationError("rubric dimensions must be an object")
        dims: dict[str, Dimension] = {}
        for key, body in raw_dims.items():
            name = DIMENSION_ALIASES.get(key, key)
            if name in dims:
                raise ValidationError(f"dimension {name!r} given twice")
            if not isinstance(body, Mapping):
                raise ValidationError(f"dimension {key!r} must be an object")
            crits = []
            for c in body.get("criteria") or ():
                if not isinstance(c, Mapping):
                    raise ValidationError(f"criterion in {key!r} must be an object")
                cname = c.get("name", c.get("criterion"))
                if not isinstance(cname, str):
                    raise ValidationError(f"criterion in {key!r} lacks a name")
                crits.append(Criterion(cname, str(c.get("explanation", "")), c.get("weight")))
            dims[name] = Dimension(body.get("weight", body.get("dim_weight")), tuple(crits))
        return cls(dims, raw_weights=d.get("raw_weights"))


def normalize_rubric(rubric: Rubric) -> Rubric:
    """Scale dimension weights and per-dimension criterion weights to sum to 1.

    Normalization always starts from the raw weights, which makes it
    idempotent bit-for-bit.
    """
    raw = rubric.raw_weights or rubric.weights_snapshot()
    dim_total = math.fsum(raw[d]["weight"] for d in DIMENSIONS)
    if dim_total <= 0:
        raise AllZeroWeights("dimensions")
    dims = {}
    for d in DIMENSIONS:
        crit_raw = raw[d]["criteria"]
        current = rubric.dimensions[d].criteria
        if len(crit_raw) != len(current):
            raise ValidationError(f"raw weights for {d!r} do not match its criteria")
        crit_total = math.fsum(crit_raw)
        if crit_total <= 0:
            raise AllZeroWeights(d)
        dims[d] = Dimension(
            raw[d]["weight"] / dim_total,
            tuple(replace(c, weight=w / crit_total) for c, w in zip(current, crit_raw)),
        )
    return Rubric(dims, raw_weights=raw)


def render_criteria(rubric: Rubric) -> str:
    """Rubric as shown to the supervisor, on its raw weight scale.

    The supervisor prompts name the second dimension ``insight``.
    """
    raw = rubric.raw_weights or rubric.weights_snapshot()
    labels = {"depth": "insight"}
    doc = {}
    for d in DIMENSIONS:
        dim = rubric.dimensions[d]
        doc[labels.get(d, d)] = {
            "weight": raw[d]["weight"],
            "criteria": [
                {"criterion": c.name, "explanation": c.explanation, "weight": w}
                for c, w in zip(dim.criteria, raw[d]["criteria"])
            ],
        }
    return json.dumps(doc, indent=2, ensure_ascii=False)


@dataclass(frozen=True)
class SupervisorVerdict:
    approved: bool
    feedback: str
    reason: str
    phase: Phase

    def __post_init__(self) -> None:
        object.__setattr__(self, "phase", Phase(self.phase))
        if not self.approved and not self.feedback.strip():
            raise ValidationError("a rejection must carry feedback")


@dataclass(frozen=True)
class IntermediateReport:
    round: int
    report_text: str


@dataclass(frozen=True)
class StateLogEntry:
    """One supervisor verdict. ``message_index`` points at the stored
    supervisor message for rejections and is None for approvals (which are
    erased from the message list)."""

    step_index: int
    state: ResearchState
    phase: Phase
    approved: bool
    summary: str
    message_index: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "step_index": self.step_index,
            "state": self.state.value,
            "phase": self.phase.value,
            "approved": self.approved,
            "summary": self.summary,
            "message_index": self.message_index,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> StateLogEntry:
        return cls(
            d["step_index"],
            ResearchState(d["state"]),
            Phase(d["phase"]),
            d["approved"],
            d["summary"],
            d.get("message_index"),
        )


@dataclass(frozen=True)
class RawTrajectory:
    trajectory_id: str
    query: ResearchQuery
    persona: Persona
    rubric: Rubric
    messages: tuple[Message, ...]
    intermediate_reports: tuple[IntermediateReport, ...] = ()
    status: TrajectoryStatus = TrajectoryStatus.COMPLETED
    state_log: tuple[StateLogEntry, ...] = ()
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "intermediate_reports", tuple(self.intermediate_reports))
        object.__setattr__(self, "state_log", tuple(self.state_log))
        object.__setattr__(self, "status", TrajectoryStatus(self.status))

    def assistant_turns(self) -> int:
        return sum(1 for m in self.messages if m.role is Role.ASSISTANT)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "trajectory_id": self.trajectory_id,
            "query": self.query.to_dict(),
            "persona": self.persona.to_dict(),
            "rubric": self.rubric.to_dict(),
            "messages": [m.to_dict() for m in self.messages],
            "intermediate_reports": [{"round": r.round, "report_text": r.report_text} for r in self.intermediate_reports],
            "status": self.status.value,
            "state_log": [e.to_dict() for e in self.state_log],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RawTrajectory:
        _check_version(d)
        return cls(
            trajectory_id=d["trajectory_id"],
            query=ResearchQuery.from_dict(d["query"]),
            persona=Persona.from_dict(d["persona"]),
            rubric=Rubric.from_dict(d["rubric"]),
            messages=tuple(Message.from_dict(m) for m in d["messages"]),
            intermediate_reports=tuple(IntermediateReport(r["round"], r["report_text"]) for r in d["intermediate_reports"]),
            status=TrajectoryStatus(d["status"]),
            state_log=tuple(StateLogEntry.from_dict(e) for e in d["state_log"]),
            provenance=dict(d.get("provenance", {})),
        )


@dataclass(frozen=True)
class RefinedTrajectory:
    query: ResearchQuery
    persona: Persona
    rubric: Rubric
    messages: tuple[Message, ...]
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))

    def assistant_turns(self) -> int:
        return sum(1 for m in self.messages if m.role is Role.ASSISTANT)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "query": self.query.to_dict(),
            "persona": self.persona.to_dict(),
            "rubric": self.rubric.to_dict(),
            "messages": [m.to_dict() for m in self.messages],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RefinedTrajectory:
        _check_version(d)
        return cls(
            query=ResearchQuery.from_dict(d["query"]),
            persona=Persona.from_dict(d["persona"]),
            rubric=Rubric.from_dict(d["rubric"]),
            messages=tuple(Message.from_dict(m) for m in d["messages"]),
            provenance=dict(d.get("provenance", {})),
        )


@dataclass
class RunManifest:
    run_id: str
    config: dict[str, Any]
    seed: int
    attempted: int = 0
    completed: int = 0
    filtered_by_length: int = 0
    failed: int = 0
    usage: dict[str, int] = field(default_factory=lambda: {"prompt_tokens": 0, "completion_tokens": 0})
    timing: dict[str, float] = field(default_factory=dict)

    def check_counts(self) -> bool:
        return self.attempted == self.completed + self.filtered_by_length + self.failed

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "seed": self.seed,
            "counts": {
                "attempted": self.attempted,
                "completed": self.completed,
                "filtered_by_length": self.filtered_by_length,
                "failed": self.failed,
            },
            "usage": self.usage,
            "timing": self.timing,
        }


def _check_version(d: Mapping[str, Any]) -> None:
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {version!r}")


@dataclass(frozen=True)
class Violation:
    rule: str
    index: int

    def __str__(self) -> str:
        return f"{self.rule}@{self.index}"


def validate_raw_trajectory(t: RawTrajectory) -> list[Violation]:
    """Check the structural invariants of a raw trajectory; empty means valid."""
    out: list[Violation] = []
    msgs = t.messages
    if not msgs or msgs[0].role is not Role.SYSTEM:
        out.append(Violation("FirstMessageNotSystem", 0))
    if len(msgs) < 2 or msgs[1].role is not Role.USER:
        out.append(Violation("SecondMessageNotUser", 1))
    seen_calls: set[str] = set()
    for i, m in enumerate(msgs):
        if m.role is Role.SUPERVISOR:
            before = msgs[i - 1].role if i > 0 else None
            after = msgs[i + 1].role if i + 1 < len(msgs) else None
            if before is not Role.ASSISTANT or after is not Role.ASSISTANT:
                out.append(Violation("SupervisorNotFlanked", i))
        elif m.role is Role.ASSISTANT:
            seen_calls.update(tc.call_id for tc in m.tool_calls)
        elif m.role is Role.TOOL and m.tool_call_id not in seen_calls:
            out.append(Violation("ToolCallIdUnresolved", i))
    for k, rep in enumerate(t.intermediate_reports):
        if rep.round != k + 1:
            out.append(Violation("ReportRoundsNotIncreasing", k))
    approved_at = {e.message_index for e in t.state_log if e.approved and e.message_index is not None}
    for i in sorted(approved_at):
        out.append(Violation("ApprovalNotErased", i))
    return out


def dumps_line(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_jsonl(path, records: Iterable[Mapping[str, Any]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_line(rec) + "\n")
            n += 1
    return n


def iter_jsonl(path) -> Iterator[tuple[int, str]]:
    """Yield (line_number, text) for every non-blank line; decoding is left
    to the caller so it can report its own typed error per line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield lineno, line
