"""Persona/query/rubric generation and the supervised research session."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field

from .llm import Gateway, GatewayError, make_request
from .model import (
    IntermediateReport,
    Message,
    Persona,
    Phase,
    RawTrajectory,
    ResearchQuery,
    ResearchState,
    Role,
    Rubric,
    StateLogEntry,
    SupervisorVerdict,
    TOOL_NAMES,
    TrajectoryStatus,
    ValidationError,
    BehaviorLog,
    DimensionMissing,
    canonical_json,
    normalize_rubric,
    render_criteria,
)
from .parsers import (
    ActionKind,
    NotJson,
    ParseError,
    ResearcherOutput,
    load_json_reply,
    parse_researcher,
    parse_supervisor,
)
from .templates import TemplateSet
from .tools import ToolEnvironment

logger = logging.getLogger(__name__)

USER_AGENT_SYSTEM = "You simulate a real e-commerce shopper faithfully and reply in the requested JSON format."
FEEDBACK_PREFIX = "SUPERVISOR FEEDBACK: "
MAX_FORMAT_REPROMPTS = 2
MIN_QUERY_WORDS = 15
MIN_CRITERIA_PER_DIMENSION = 2

_CONSTRAINT = re.compile(
    r"\b(under|below|less than|no more than|at most|at least|budget|within|between|must|need|needs|"
    r"required?|requires|compatible|without|prefer|prefers|only|max|maximum|minimum)\b|[$¥€£]\s?\d",
    re.IGNORECASE,
)

PLAN_ANSWER_FEEDBACK = (
    "A final answer is not acceptable yet. First present a research plan covering information gathering, "
    "product search, product detail examination and report synthesis, then gather evidence with the tools."
)
REPORT_ACTION_FEEDBACK = (
    "Research is finished and you are in the final report phase. Do not call tools or re-plan; revise the "
    "report and resubmit it inside <answer>...</answer>."
)


class EmptyBehaviorLog(ValueError):
    pass


class MalformedUserAgentReply(ValueError):
    pass


class MalformedRubric(ValueError):
    pass


@dataclass(frozen=True)
class SessionLimits:
    max_steps: int = 40
    max_revisions_per_step: int = 3
    max_total_revisions: int = 10

    def __post_init__(self) -> None:
        if min(self.max_steps, self.max_revisions_per_step, self.max_total_revisions) < 1:
            raise ValueError("session limits must all be >= 1")

    def to_dict(self) -> dict[str, int]:
        return {
            "max_steps": self.max_steps,
            "max_revisions_per_step": self.max_revisions_per_step,
            "max_total_revisions": self.max_total_revisions,
        }


@dataclass
class StepOutcome:
    """What one supervised step settled on; ``output`` is the stored version."""

    state: ResearchState
    output: ResearcherOutput
    verdicts: list[SupervisorVerdict] = field(default_factory=list)
    revisions_used: int = 0


# ---------------------------------------------------------------------------
# phase 1


def render_behavior(log: BehaviorLog) -> str:
    return "\n".join(f"- [{e.timestamp}] {e.kind}: {e.payload}" for e in log.events)


def _user_agent_call(gateway: Gateway, prompt: str, history: list[Message] | None = None) -> str:
    msgs = [Message(Role.SYSTEM, USER_AGENT_SYSTEM), Message(Role.USER, prompt), *(history or [])]
    return gateway.complete(make_request("user_agent", msgs)).text


def is_research_grade(query: str) -> bool:
    """Structural check that a query needs research: long enough and constrained."""
    return len(query.split()) >= MIN_QUERY_WORDS and _CONSTRAINT.search(query) is not None


def generate_persona_query(log: BehaviorLog, gateway: Gateway, templates: TemplateSet, *,
                           query_id: str | None = None) -> tuple[Persona, ResearchQuery]:
    if not log.events:
        raise EmptyBehaviorLog(f"user {log.user_id} has no events")
    reply = _user_agent_call(gateway, templates.render("user_agent_persona", behavior_history=render_behavior(log)))
    try:
        doc = load_json_reply(reply)
    except NotJson as exc:
        raise MalformedUserAgentReply(str(exc)) from None
    if not isinstance(doc, dict) or "persona" not in doc or "query" not in doc:
        raise MalformedUserAgentReply('reply needs "persona" and "query" fields')
    raw_persona, text = doc["persona"], doc["query"]
    if not isinstance(text, str):
        raise MalformedUserAgentReply('"query" must be a string')
    try:
        if isinstance(raw_persona, str):
            persona = Persona(raw_persona)
        elif isinstance(raw_persona, dict) and isinstance(raw_persona.get("profile_text"), str):
            persona = Persona(raw_persona["profile_text"], dict(raw_persona.get("facets") or {}))
        else:
            raise MalformedUserAgentReply('"persona" must be a string or carry "profile_text"')
        query = ResearchQuery(query_id or f"q-{log.user_id}", text.strip(), log.user_id)
    except ValidationError as exc:
        raise MalformedUserAgentReply(str(exc)) from None
    if not is_research_grade(query.text):
        raise MalformedUserAgentReply(
            f"query is not research-grade (needs >= {MIN_QUERY_WORDS} words and a constraint): {query.text!r}"
        )
    return persona, query


def _parse_rubric_reply(reply: str) -> Rubric:
    try:
        doc = load_json_reply(reply)
    except NotJson as exc:
        raise MalformedRubric(str(exc)) from None
    if not isinstance(doc, dict):
        raise MalformedRubric("rubric reply is not a JSON object")
    try:
        rubric = Rubric.from_dict(doc)
    except DimensionMissing:
        raise
    except (ValidationError, TypeError) as exc:
        raise MalformedRubric(str(exc)) from None
    for name, dim in rubric.dimensions.items():
        if len(dim.criteria) < MIN_CRITERIA_PER_DIMENSION:
            raise MalformedRubric(f"dimension {name!r} has fewer than {MIN_CRITERIA_PER_DIMENSION} criteria")
    return normalize_rubric(rubric)


def generate_rubric(persona: Persona, query: ResearchQuery, gateway: Gateway, templates: TemplateSet) -> Rubric:
    prompt = templates.render("user_agent_rubric", persona=persona.profile_text, question=query.text)
    reply = _user_agent_call(gateway, prompt)
    try:
        return _parse_rubric_reply(reply)
    except (MalformedRubric, DimensionMissing, ValidationError) as exc:
        logger.info("rubric reply rejected (%s); reprompting once", exc)
        fix = Message(Role.USER, f"Your rubric was invalid: {exc}. Reply again with the complete JSON rubric: all four "
                                 f"dimensions, each with at least {MIN_CRITERIA_PER_DIMENSION} criteria.")
        reply = _user_agent_call(gateway, prompt, [Message(Role.ASSISTANT, reply), fix])
    return _parse_rubric_reply(reply)


# ---------------------------------------------------------------------------
# phase 2


def render_history(messages) -> str:
    """Plain-text transcript: ``ROLE: content`` per message, tool calls as JSON."""
    parts = []
    for m in messages:
        text = f"{m.role.value.upper()}: {m.content}"
        for tc in m.tool_calls:
            text += "\nTOOL_CALL: " + canonical_json({"name": tc.tool_name, "arguments": tc.arguments})
        parts.append(text)
    return "\n\n".join(parts)


def to_wire(messages) -> list[Message]:
    """Trajectory messages as sent to the research agent; supervisor turns become user turns."""
    out = []
    for m in messages:
        if m.role is Role.SUPERVISOR:
            out.append(Message(Role.USER, FEEDBACK_PREFIX + m.content))
        else:
            out.append(Message(m.role, m.content, m.tool_calls, m.tool_call_id))
    return out


class _SessionFailed(Exception):
    def __init__(self, status: TrajectoryStatus, detail: str):
        super().__init__(detail)
        self.status = status
        self.detail = detail


_PHASE_TEMPLATE = {
    Phase.CHECK_PLAN: "plan_eval",
    Phase.CHECK_TOOLCALL: "toolcall_eval",
    Phase.FINAL_ANSWER_GATE: "final_answer_gate",
    Phase.CHECK_REPORT: "final_report_eval",
}


class ResearchSession:
    """One query researched under step-level supervision.

    Every researcher output is judged by the supervisor prompt for the current
    state. Approved outputs are kept as-is and the approval itself leaves no
    message; a rejection stores the feedback (role ``supervisor``) and asks the
    researcher to revise the same step.
    """

    def __init__(self, query: ResearchQuery, persona: Persona, rubric: Rubric, env: ToolEnvironment,
                 gateway: Gateway, templates: TemplateSet, limits: SessionLimits | None = None, *,
                 trajectory_id: str | None = None, current_date: str = ""):
        self.query = query
        self.persona = persona
        self.rubric = rubric
        self.env = env
        self.gateway = gateway
        self.templates = templates
        self.limits = limits or SessionLimits()
        self.trajectory_id = trajectory_id or f"traj-{query.query_id}"
        self.criteria_text = render_criteria(rubric)
        self.messages: list[Message] = [
            Message(Role.SYSTEM, templates.render("researcher_system", current_date=current_date)),
            Message(Role.USER, query.text),
        ]
        self.state = ResearchState.PLAN
        self.step_index = 0
        self.total_revisions = 0
        self.n_calls = 0
        self.executed: Counter[str] = Counter()
        self.plan_approved = False
        self.state_log: list[StateLogEntry] = []
        self.reports: list[IntermediateReport] = []
        self.outcomes: list[StepOutcome] = []

    # -- driver -------------------------------------------------------------

    def run(self) -> RawTrajectory:
        provenance: dict = {"limits": self.limits.to_dict()}
        try:
            status = self._loop()
        except _SessionFailed as exc:
            status = exc.status
            provenance["failure"] = exc.detail
        except GatewayError as exc:
            status = TrajectoryStatus.FAILED_PARSE
            provenance["failure"] = f"{type(exc).__name__}: {exc}"
        if self.messages[-1].role is Role.SUPERVISOR:
            # feedback nobody answered; keep the verdict in the log only
            dropped = len(self.messages) - 1
            self.messages.pop()
            self.state_log = [
                StateLogEntry(e.step_index, e.state, e.phase, e.approved, e.summary, None)
                if e.message_index == dropped else e
                for e in self.state_log
            ]
        provenance["steps"] = len(self.outcomes)
        provenance["total_revisions"] = self.total_revisions
        if status is not TrajectoryStatus.COMPLETED:
            logger.info("session %s ended with %s", self.trajectory_id, status.value)
        return RawTrajectory(
            trajectory_id=self.trajectory_id,
            query=self.query,
            persona=self.persona,
            rubric=self.rubric,
            messages=tuple(self.messages),
            intermediate_reports=tuple(self.reports),
            status=status,
            state_log=tuple(self.state_log),
            provenance=provenance,
        )

    def _loop(self) -> TrajectoryStatus:
        while True:
            if self.step_index >= self.limits.max_steps:
                raise _SessionFailed(TrajectoryStatus.FAILED_STEP_CAP, f"step cap {self.limits.max_steps} reached")
            out, idx = self._researcher_turn(0)
            if self._supervise_step(out, idx):
                return TrajectoryStatus.COMPLETED
            self.step_index += 1

    def _supervise_step(self, out: ResearcherOutput, idx: int) -> bool:
        """Drive one step to approval. Returns True when the session is done."""
        outcome = StepOutcome(self.state, out)
        while True:
            phase, verdict = self._phase_for(out)
            if verdict is None:
                verdict = self._ask_supervisor(phase, idx)
            outcome.verdicts.append(verdict)
            if verdict.approved:
                self._log(phase, True, verdict.reason, None)
                result = self._on_approve(phase, out, idx)
                if result == "recheck":
                    continue
                outcome.output = out
                self.outcomes.append(outcome)
                return result == "done"

            if phase is Phase.CHECK_REPORT and out.kind is ActionKind.ANSWER:
                self.reports.append(IntermediateReport(len(self.reports) + 1, out.answer or ""))
            outcome.revisions_used += 1
            self.total_revisions += 1
            if outcome.revisions_used > self.limits.max_revisions_per_step:
                self._log(phase, False, verdict.reason, None)
                raise _SessionFailed(TrajectoryStatus.FAILED_REVISION_CAP,
                                     f"step {self.step_index} rejected {outcome.revisions_used} times")
            if self.total_revisions > self.limits.max_total_revisions:
                self._log(phase, False, verdict.reason, None)
                raise _SessionFailed(TrajectoryStatus.FAILED_REVISION_CAP,
                                     f"{self.total_revisions} revisions in total")
            self.messages.append(Message(Role.SUPERVISOR, verdict.feedback, state_tag=self.state))
            self._log(phase, False, verdict.reason, len(self.messages) - 1)
            out, idx = self._researcher_turn(outcome.revisions_used)

    def _phase_for(self, out: ResearcherOutput) -> tuple[Phase, SupervisorVerdict | None]:
        """Which check applies to ``out`` in the current state; illegal moves get a synthetic rejection."""
        if self.state is ResearchState.PLAN:
            if out.kind is ActionKind.ANSWER:
                return Phase.CHECK_PLAN, SupervisorVerdict(False, PLAN_ANSWER_FEEDBACK, "synthetic: answer before research",
                                                           Phase.CHECK_PLAN)
            return Phase.CHECK_PLAN, None
        if self.state is ResearchState.TOOLCALL:
            if out.kind is ActionKind.ANSWER:
                return Phase.FINAL_ANSWER_GATE, None
            return Phase.CHECK_TOOLCALL, None
        if out.kind is not ActionKind.ANSWER:
            return Phase.CHECK_REPORT, SupervisorVerdict(False, REPORT_ACTION_FEEDBACK,
                                                         "synthetic: non-answer in report phase", Phase.CHECK_REPORT)
        return Phase.CHECK_REPORT, None

    def _on_approve(self, phase: Phase, out: ResearcherOutput, idx: int) -> str:
        if phase is Phase.CHECK_PLAN:
            self.plan_approved = True
            self.state = ResearchState.TOOLCALL
            # a plan that already carries a tool call still has to pass the tool-call check
            return "recheck" if out.kind is ActionKind.TOOL_CALL else "step"
        if phase is Phase.CHECK_TOOLCALL:
            if out.kind is ActionKind.TOOL_CALL:
                call = out.tool_call
                assert call is not None
                content = self.env.execute(call)
                self.executed[call.tool_name] += 1
                self.messages.append(Message(Role.TOOL, content, tool_call_id=call.call_id,
                                             state_tag=ResearchState.TOOLCALL))
            return "step"
        if phase is Phase.FINAL_ANSWER_GATE:
            self.state = ResearchState.REPORT
            m = self.messages[idx]
            self.messages[idx] = Message(m.role, m.content, m.tool_calls, m.tool_call_id, ResearchState.REPORT, m.round)
            return "recheck"
        return "done"

    def _log(self, phase: Phase, approved: bool, summary: str, message_index: int | None) -> None:
        self.state_log.append(StateLogEntry(self.step_index, self.state, phase, approved, summary.strip(),
                                            message_index))

    # -- agents -------------------------------------------------------------

    def _researcher_turn(self, round_: int) -> tuple[ResearcherOutput, int]:
        wire = to_wire(self.messages)
        call_id = f"call_{self.n_calls}"
        last_error: ParseError | None = None
        for _ in range(MAX_FORMAT_REPROMPTS + 1):
            text = self.gateway.complete(make_request("research_agent", wire)).text
            try:
                out = parse_researcher(text, strict=True, call_id=call_id)
            except ParseError as exc:
                last_error = exc
                wire = wire + [
                    Message(Role.ASSISTANT, text),
                    Message(Role.USER, f"FORMAT ERROR: {exc}. Reply again using exactly the required output format."),
                ]
                continue
            tool_calls = (out.tool_call,) if out.tool_call is not None else ()
            if tool_calls:
                self.n_calls += 1
            self.messages.append(Message(Role.ASSISTANT, text, tool_calls, state_tag=self.state, round=round_))
            return out, len(self.messages) - 1
        raise _SessionFailed(TrajectoryStatus.FAILED_PARSE, f"researcher output unparseable: {last_error}")

    def _ask_supervisor(self, phase: Phase, idx: int) -> SupervisorVerdict:
        system = self.templates.render("supervisor_system", question=self.query.text,
                                       evaluation_criteria=self.criteria_text)
        digest = self._checklist()
        prompt = self.templates.render(
            _PHASE_TEMPLATE[phase],
            question=self.query.text,
            history_str=render_history(self.messages[1:idx]),
            latte_response=self.messages[idx].content,
            evaluation_criteria=self.criteria_text,
            checklist_summary=digest,
            status_summary=digest,
        )
        wire = [Message(Role.SYSTEM, system), Message(Role.USER, prompt)]
        last_error: ParseError | None = None
        for _ in range(MAX_FORMAT_REPROMPTS + 1):
            text = self.gateway.complete(make_request("supervisor", wire)).text
            try:
                return parse_supervisor(text, phase)
            except ParseError as exc:
                last_error = exc
                wire = wire + [
                    Message(Role.ASSISTANT, text),
                    Message(Role.USER, f"FORMAT ERROR: {exc}. Respond again in the required "
                                       "<supervisor_response> XML format."),
                ]
        raise _SessionFailed(TrajectoryStatus.FAILED_PARSE, f"supervisor output unparseable: {last_error}")

    def _checklist(self) -> str:
        per_tool = ", ".join(f"{name}={self.executed[name]}" for name in TOOL_NAMES)
        lines = [
            f"- Current state: {self.state.value}",
            f"- Plan approved: {'yes' if self.plan_approved else 'no'}",
            f"- Approved tool calls: {sum(self.executed.values())} ({per_tool})",
            f"- Report drafts rejected so far: {len(self.reports)}",
            f"- Revisions used: {self.total_revisions}/{self.limits.max_total_revisions}",
            f"- Steps remaining: {self.limits.max_steps - self.step_index - 1}",
        ]
        return "\n".join(lines)


def run_research_session(query: ResearchQuery, persona: Persona, rubric: Rubric, env: ToolEnvironment,
                         gateway: Gateway, limits: SessionLimits | None = None, *,
                         templates: TemplateSet | None = None, trajectory_id: str | None = None,
                         current_date: str = "") -> RawTrajectory:
    """Run a full supervised session; failures are reported through ``status``, never raised."""
    return ResearchSession(query, persona, rubric, env, gateway, templates or TemplateSet(), limits,
                           trajectory_id=trajectory_id, current_date=current_date).run()


def final_report(t: RawTrajectory) -> str | None:
    """Answer text of the approved final report, if the session completed."""
    if t.status is not TrajectoryStatus.COMPLETED:
        return None
    for m in reversed(t.messages):
        if m.role is Role.ASSISTANT:
            try:
                out = parse_researcher(m.content, strict=False)
            except ParseError:
                return None
            return out.answer
    return None
