"""Rubric-driven pairwise report scoring (RACE) and Effective Product Count."""

from __future__ import annotations

import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Collection, Iterable, Mapping

from .llm import Gateway, GatewayError, make_request
from .model import DIMENSIONS, DimensionMissing, Message, Role, Rubric
from .parsers import NotJson, load_json_reply
from .templates import TemplateSet

logger = logging.getLogger(__name__)

DEFAULT_S_MAX = 10
MAX_JUDGE_REPROMPTS = 2
JUDGE_SYSTEM = "You are a rigorous, impartial judge of product research reports. Reply with JSON only."
DIMENSION_LABELS = {
    "comprehensiveness": "Comprehensiveness",
    "depth": "Depth / Insight",
    "instruction_following": "Instruction Following",
    "readability": "Readability",
}
SUMMARY_KEYS = {"comprehensiveness": "comp", "depth": "depth", "instruction_following": "inst", "readability": "read"}


class MalformedJudgeReply(ValueError):
    pass


class MissingCriterion(ValueError):
    def __init__(self, name: str):
        super().__init__(f"judge reply lacks criterion {name!r}")
        self.name = name


class NegativeScore(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


@dataclass(frozen=True)
class CriterionScore:
    dimension: str
    criterion: str
    s_target: float
    s_reference: float
    judge_rationale: str = ""
    clamped: bool = False


# ---------------------------------------------------------------------------
# aggregation


def aggregate_dimension(scores: Iterable[CriterionScore], dimension: str, rubric: Rubric) -> tuple[float, float]:
    """Weighted sum of criterion scores within one dimension, for target and reference."""
    by_name = {s.criterion: s for s in scores if s.dimension == dimension}
    tgt = ref = 0.0
    for c in rubric.dimensions[dimension].criteria:
        if c.name not in by_name:
            raise MissingCriterion(c.name)
        s = by_name[c.name]
        tgt += c.weight * s.s_target
        ref += c.weight * s.s_reference
    return tgt, ref


def aggregate_overall(dim_scores: Mapping[str, tuple[float, float]], rubric: Rubric) -> tuple[float, float]:
    tgt = ref = 0.0
    for d in DIMENSIONS:
        if d not in dim_scores:
            raise DimensionMissing(d)
        w = rubric.dimensions[d].weight
        tgt += w * dim_scores[d][0]
        ref += w * dim_scores[d][1]
    return tgt, ref


def final_relative(s_int_tgt: float, s_int_ref: float) -> float:
    """Target's share of the summed scores; 0.5 is parity, 0.5 also when both are zero.

    The smaller side is always the one divided, and the larger side is taken
    as the complement, so swapping the arguments sums to exactly 1.
    """
    if s_int_tgt < 0 or s_int_ref < 0:
        raise NegativeScore(f"scores must be non-negative, got {s_int_tgt}, {s_int_ref}")
    total = s_int_tgt + s_int_ref
    if total == 0:
        return 0.5
    if s_int_tgt <= s_int_ref:
        return s_int_tgt / total
    return 1.0 - s_int_ref / total


@dataclass
class RaceResult:
    dimension_scores: dict[str, tuple[float, float]]
    s_int_target: float
    s_int_reference: float
    s_final: float
    criterion_scores: list[CriterionScore] = field(default_factory=list)

    @property
    def dimension_relative(self) -> dict[str, float]:
        return {d: final_relative(*self.dimension_scores[d]) for d in DIMENSIONS}

    def reported(self) -> dict[str, float]:
        """Scores on the x100 presentation scale."""
        out = {"overall": 100.0 * self.s_final}
        for d, v in self.dimension_relative.items():
            out[SUMMARY_KEYS[d]] = 100.0 * v
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "dimension_scores": {d: {"target": t, "reference": r} for d, (t, r) in self.dimension_scores.items()},
            "s_int_target": self.s_int_target,
            "s_int_reference": self.s_int_reference,
            "s_final": self.s_final,
            "reported": self.reported(),
            "criterion_scores": [
                {"dimension": s.dimension, "criterion": s.criterion, "s_target": s.s_target,
                 "s_reference": s.s_reference, "rationale": s.judge_rationale, "clamped": s.clamped}
                for s in self.criterion_scores
            ],
        }


def race_from_scores(scores: list[CriterionScore], rubric: Rubric) -> RaceResult:
    dims = {d: aggregate_dimension(scores, d, rubric) for d in DIMENSIONS}
    s_t, s_r = aggregate_overall(dims, rubric)
    return RaceResult(dims, s_t, s_r, final_relative(s_t, s_r), list(scores))


# ---------------------------------------------------------------------------
# judge


def _render_criteria(rubric: Rubric, dimension: str) -> str:
    return "\n".join(f"- {c.name}: {c.explanation}" for c in rubric.dimensions[dimension].criteria)


def _number(value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedJudgeReply(f"score {value!r} is not a number")
    return float(value)


def _parse_judge(text: str, names: list[str]) -> dict[str, tuple[float, float, str]]:
    try:
        doc = load_json_reply(text)
    except NotJson as exc:
        raise MalformedJudgeReply(str(exc)) from None
    items = doc.get("scores") if isinstance(doc, dict) else None
    if not isinstance(items, list):
        raise MalformedJudgeReply('reply needs a "scores" list')
    got: dict[str, tuple[float, float, str]] = {}
    for item in items:
        if not isinstance(item, dict) or not isinstance(item.get("criterion"), str):
            raise MalformedJudgeReply("each score needs a criterion name")
        got.setdefault(item["criterion"], (_number(item.get("report_a")), _number(item.get("report_b")),
                                           str(item.get("rationale", ""))))
    for n in names:
        if n not in got:
            raise MissingCriterion(n)
    return got


def _clamp(x: float, s_max: float) -> tuple[float, bool]:
    if x < 0:
        return 0.0, True
    if x > s_max:
        return float(s_max), True
    return x, False


def judge_pairwise(target_report: str, reference_report: str, rubric: Rubric, gateway: Gateway, *,
                   question: str = "", templates: TemplateSet | None = None, seed: int | str = 0,
                   shuffle: bool = True, s_max: int = DEFAULT_S_MAX) -> list[CriterionScore]:
    """One judge call per dimension; report positions are shuffled per call and mapped back."""
    if not target_report.strip() or not reference_report.strip():
        raise ValueError("both reports must be non-empty")
    templates = templates or TemplateSet()
    out: list[CriterionScore] = []
    for d in DIMENSIONS:
        swap = shuffle and random.Random(f"{seed}:{d}").random() < 0.5
        a, b = (reference_report, target_report) if swap else (target_report, reference_report)
        prompt = templates.render("judge_dimension", question=question, dimension=DIMENSION_LABELS[d],
                                  criteria=_render_criteria(rubric, d), report_a=a, report_b=b, s_max=s_max)
        names = [c.name for c in rubric.dimensions[d].criteria]
        wire = [Message(Role.SYSTEM, JUDGE_SYSTEM), Message(Role.USER, prompt)]
        parsed = None
        for _ in range(MAX_JUDGE_REPROMPTS + 1):
            text = gateway.complete(make_request("judge", wire)).text
            try:
                parsed = _parse_judge(text, names)
                break
            except MalformedJudgeReply as exc:
                wire = wire + [Message(Role.ASSISTANT, text),
                               Message(Role.USER, f"Invalid reply: {exc}. Reply with the required JSON only.")]
        if parsed is None:
            raise MalformedJudgeReply(f"judge reply for {d} unusable after {MAX_JUDGE_REPROMPTS} reprompts")
        for n in names:
            sa, sb, why = parsed[n]
            s_tgt, s_ref = (sb, sa) if swap else (sa, sb)
            s_tgt, c1 = _clamp(s_tgt, s_max)
            s_ref, c2 = _clamp(s_ref, s_max)
            if c1 or c2:
                logger.warning("judge score out of range for %s/%s; clamped", d, n)
            out.append(CriterionScore(d, n, s_tgt, s_ref, why, c1 or c2))
    return out


# ---------------------------------------------------------------------------
# effective product count

_TOKEN = re.compile(r"[A-Za-z0-9][A-Za-z0-9_\-]*")
_ANNOTATION = re.compile(r"product_id\s*[:=]\s*[\"'`]?([^\s,;|\"'`)\]]+)", re.IGNORECASE)


@dataclass(frozen=True)
class EProdResult:
    distinct_valid_ids: tuple[str, ...]

    @property
    def count(self) -> int:
        return len(self.distinct_valid_ids)


def effective_product_count(report_text: str, catalog: Collection[str]) -> EProdResult:
    """Distinct catalog ids mentioned as delimited tokens or in product_id: annotations."""
    found: dict[str, None] = {}
    candidates = [m.group(0) for m in _TOKEN.finditer(report_text)]
    candidates += [m.group(1).rstrip(".:") for m in _ANNOTATION.finditer(report_text)]
    for tok in candidates:
        for cand in (tok, tok.rstrip("-_")):
            if cand in catalog:
                found.setdefault(cand, None)
                break
    return EProdResult(tuple(found))


# ---------------------------------------------------------------------------
# benchmark


@dataclass(frozen=True)
class BenchmarkItem:
    query_id: str
    target_report: str
    reference_report: str
    rubric: Rubric | None
    question: str = ""
    error: str | None = None


@dataclass
class ItemResult:
    query_id: str
    race: RaceResult | None = None
    eprod: EProdResult | None = None
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        if self.error is not None:
            return {"query_id": self.query_id, "error": self.error}
        assert self.race is not None and self.eprod is not None
        return {
            "query_id": self.query_id,
            "race": self.race.to_dict(),
            "eprod": {"count": self.eprod.count, "distinct_valid_ids": list(self.eprod.distinct_valid_ids)},
        }


@dataclass
class BenchmarkReport:
    items: list[ItemResult]
    summary: dict[str, float | int | None]

    def table(self) -> str:
        cols = ("overall", "comp", "depth", "inst", "read", "eprod")
        head = f"{'query_id':<24}" + "".join(f"{c:>9}" for c in cols)
        lines = [head, "-" * len(head)]
        for it in self.items:
            if it.error is not None:
                lines.append(f"{it.query_id:<24}  ERROR: {it.error}")
                continue
            assert it.race is not None and it.eprod is not None
            rep = it.race.reported()
            vals = [rep[c] for c in cols[:-1]]
            lines.append(f"{it.query_id:<24}" + "".join(f"{v:>9.2f}" for v in vals) + f"{it.eprod.count:>9d}")
        s = self.summary
        if s.get("overall") is None:
            lines.append(f"{'MEAN':<24}  no scored items")
        else:
            lines.append(f"{'MEAN':<24}" + "".join(f"{s[c]:>9.2f}" for c in cols))
        lines.append(f"Overall {s['overall']:.2f}" if s.get("overall") is not None else "Overall n/a")
        return "\n".join(lines)


def _mean(xs: list[float]) -> float | None:
    return sum(xs) / len(xs) if xs else None


def summarize(items: list[ItemResult]) -> dict[str, float | int | None]:
    ok = [it for it in items if it.error is None and it.race is not None and it.eprod is not None]
    summary: dict[str, float | int | None] = {
        "overall": _mean([100.0 * it.race.s_final for it in ok]),  # type: ignore[union-attr]
    }
    for d, key in SUMMARY_KEYS.items():
        summary[key] = _mean([100.0 * it.race.dimension_relative[d] for it in ok])  # type: ignore[union-attr]
    summary["eprod"] = _mean([float(it.eprod.count) for it in ok])  # type: ignore[union-attr]
    summary["items"] = len(items)
    summary["errors"] = len(items) - len(ok)
    return summary


def _evaluate(item: BenchmarkItem, catalog: Collection[str], gateway: Gateway, templates: TemplateSet,
              seed: int | str) -> ItemResult:
    if item.error is not None or item.rubric is None:
        return ItemResult(item.query_id, error=item.error or "missing rubric")
    try:
        scores = judge_pairwise(item.target_report, item.reference_report, item.rubric, gateway,
                                question=item.question, templates=templates, seed=f"{seed}:{item.query_id}")
        race = race_from_scores(scores, item.rubric)
    except (MalformedJudgeReply, MissingCriterion, GatewayError, ValueError) as exc:
        return ItemResult(item.query_id, error=f"{type(exc).__name__}: {exc}")
    return ItemResult(item.query_id, race, effective_product_count(item.target_report, catalog))


def benchmark(items: list[BenchmarkItem], catalog: Collection[str], gateway: Gateway, *,
              templates: TemplateSet | None = None, seed: int | str = 0, workers: int = 1) -> BenchmarkReport:
    if not items:
        raise EmptyBatch("benchmark batch is empty")
    templates = templates or TemplateSet()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda it: _evaluate(it, catalog, gateway, templates, seed), items))
    else:
        results = [_evaluate(it, catalog, gateway, templates, seed) for it in items]
    return BenchmarkReport(results, summarize(results))
