from __future__ import annotations

import json
import random
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import policy_gateway, rubric, scripted
from prodresearch.model import DIMENSIONS, Criterion, Dimension, DimensionMissing, Rubric, normalize_rubric
from prodresearch.race import (
    BenchmarkItem,
    CriterionScore,
    EmptyBatch,
    MalformedJudgeReply,
    MissingCriterion,
    NegativeScore,
    aggregate_dimension,
    aggregate_overall,
    benchmark,
    effective_product_count,
    final_relative,
    judge_pairwise,
    race_from_scores,
)


def oracle(raw_dim_w, raw_crit_w, s_t, s_r):
    """Brute-force RACE from raw (unnormalized) weights: normalize, weight, sum, ratio."""
    W = [w / sum(raw_dim_w) for w in raw_dim_w]
    tot_t = tot_r = 0.0
    for d in range(len(W)):
        ws = [w / sum(raw_crit_w[d]) for w in raw_crit_w[d]]
        tot_t += W[d] * sum(w * s for w, s in zip(ws, s_t[d]))
        tot_r += W[d] * sum(w * s for w, s in zip(ws, s_r[d]))
    if tot_t + tot_r == 0:
        return 0.5
    return tot_t / (tot_t + tot_r)


def build(raw_dim_w, raw_crit_w, s_t, s_r):
    dims = {}
    for k, d in enumerate(DIMENSIONS):
        dims[d] = Dimension(raw_dim_w[k], tuple(Criterion(f"{d}{i}", "", w) for i, w in enumerate(raw_crit_w[k])))
    r = normalize_rubric(Rubric(dims))
    scores = [CriterionScore(d, f"{d}{i}", s_t[k][i], s_r[k][i])
              for k, d in enumerate(DIMENSIONS) for i in range(len(raw_crit_w[k]))]
    return r, scores


def random_case(rng):
    raw_dim_w = [rng.uniform(0.01, 1) for _ in DIMENSIONS]
    sizes = [rng.randint(2, 6) for _ in DIMENSIONS]
    raw_crit_w = [[rng.uniform(0.01, 1) for _ in range(n)] for n in sizes]
    s_t = [[rng.randint(0, 10) for _ in range(n)] for n in sizes]
    s_r = [[rng.randint(0, 10) for _ in range(n)] for n in sizes]
    return raw_dim_w, raw_crit_w, s_t, s_r


def test_matches_oracle():
    rng = random.Random(2024)
    for _ in range(300):
        case = random_case(rng)
        r, scores = build(*case)
        assert abs(race_from_scores(scores, r).s_final - oracle(*case)) <= 1e-9


def test_dimension_examples():
    r = Rubric({d: Dimension(0.25, (Criterion("a", "", 0.5), Criterion("b", "", 0.5))) for d in DIMENSIONS})
    scores = [CriterionScore("depth", "a", 8, 1), CriterionScore("depth", "b", 6, 1)]
    assert aggregate_dimension(scores, "depth", r) == (7.0, 1.0)
    with pytest.raises(MissingCriterion):
        aggregate_dimension(scores[:1], "depth", r)


def test_overall_example():
    weights = {"comprehensiveness": 0.6, "depth": 0.4, "instruction_following": 0.0, "readability": 0.0}
    r = Rubric({d: Dimension(w, (Criterion("a", "", 1.0),)) for d, w in weights.items()})
    dims = {"comprehensiveness": (7.0, 0.0), "depth": (4.0, 0.0), "instruction_following": (9.0, 0.0),
            "readability": (9.0, 0.0)}
    assert aggregate_overall(dims, r)[0] == pytest.approx(5.8, abs=1e-12)
    del dims["readability"]
    with pytest.raises(DimensionMissing):
        aggregate_overall(dims, r)


def test_final_relative_examples():
    assert final_relative(3.0, 3.0) == 0.5
    assert final_relative(5.8, 0.0) == 1.0
    assert final_relative(0.0, 0.0) == 0.5
    with pytest.raises(NegativeScore):
        final_relative(-1.0, 2.0)


@given(st.floats(0, 1e6), st.floats(0, 1e6))
@settings(max_examples=500)
def test_antisymmetry_exact(a, b):
    assert final_relative(a, b) + final_relative(b, a) == 1.0
    assert 0.0 <= final_relative(a, b) <= 1.0


def test_parity_exact():
    rng = random.Random(5)
    for _ in range(100):
        raw_dim_w, raw_crit_w, s_t, _ = random_case(rng)
        r, scores = build(raw_dim_w, raw_crit_w, s_t, s_t)
        assert race_from_scores(scores, r).s_final == 0.5


def test_monotone_in_target_score():
    rng = random.Random(9)
    for _ in range(100):
        case = random_case(rng)
        r, scores = build(*case)
        base = race_from_scores(scores, r).s_final
        k = rng.randrange(len(scores))
        bumped = list(scores)
        bumped[k] = CriterionScore(scores[k].dimension, scores[k].criterion, scores[k].s_target + 1,
                                   scores[k].s_reference)
        assert race_from_scores(bumped, r).s_final >= base


def test_scale_invariance():
    rng = random.Random(4)
    for _ in range(100):
        case = random_case(rng)
        r, scores = build(*case)
        c = rng.uniform(0.1, 10)
        scaled = [CriterionScore(s.dimension, s.criterion, s.s_target * c, s.s_reference * c) for s in scores]
        assert race_from_scores(scaled, r).s_final == pytest.approx(race_from_scores(scores, r).s_final, abs=1e-12)


# -- judge -----------------------------------------------------------------------

def judge_reply(names, a, b):
    return json.dumps({"scores": [{"criterion": n, "report_a": a, "report_b": b, "rationale": "r"} for n in names]})


NAMES = {d: [c.name for c in rubric().dimensions[d].criteria] for d in DIMENSIONS}


def test_judge_scripted_values():
    gw = scripted(judge=[judge_reply(NAMES[d], 6, 6) for d in DIMENSIONS])
    scores = judge_pairwise("target", "reference", rubric(), gw, seed=1)
    assert len(scores) == 8 and {(s.s_target, s.s_reference) for s in scores} == {(6.0, 6.0)}
    assert len(gw.backend.log) == 4


def test_judge_order_is_shuffled_and_inverted():
    def policy(req):
        prompt = req.messages[1].content
        names = re.findall(r"^- (\w+):", prompt.split("## Criteria", 1)[1], re.M)
        a_is_target = prompt.index("TARGET TEXT") < prompt.index("REFERENCE TEXT")
        return judge_reply(names, 9 if a_is_target else 3, 3 if a_is_target else 9)

    positions = set()
    for seed in range(6):
        seen = []

        def recording(req):
            seen.append(req.messages[1].content.index("TARGET TEXT") < req.messages[1].content.index("REFERENCE TEXT"))
            return policy(req)

        scores = judge_pairwise("TARGET TEXT", "REFERENCE TEXT", rubric(), policy_gateway(recording), seed=seed)
        assert all((s.s_target, s.s_reference) == (9.0, 3.0) for s in scores)
        positions.update(seen)
    assert positions == {True, False}


def test_judge_missing_criterion():
    replies = [judge_reply(NAMES[d][:1], 5, 5) for d in DIMENSIONS]
    with pytest.raises(MissingCriterion):
        judge_pairwise("t", "r", rubric(), scripted(judge=replies), shuffle=False)


def test_judge_clamps():
    replies = [judge_reply(NAMES[d], 14, -2) for d in DIMENSIONS]
    scores = judge_pairwise("t", "r", rubric(), scripted(judge=replies), shuffle=False)
    assert all(s.s_target == 10 and s.s_reference == 0 and s.clamped for s in scores)


def test_judge_malformed_after_two_reprompts():
    with pytest.raises(MalformedJudgeReply):
        judge_pairwise("t", "r", rubric(), scripted(judge=["nope"] * 3), shuffle=False)


def test_judge_reprompt_recovers():
    replies = ["nope", judge_reply(NAMES["comprehensiveness"], 5, 5)] + \
        [judge_reply(NAMES[d], 5, 5) for d in DIMENSIONS[1:]]
    scores = judge_pairwise("t", "r", rubric(), scripted(judge=replies), shuffle=False)
    assert len(scores) == 8


def test_judge_needs_reports():
    with pytest.raises(ValueError):
        judge_pairwise(" ", "r", rubric(), scripted())


# -- effective product count ----------------------------------------------------------

CATALOG = {"AP-1001", "AP-2001", "HM-4001", "p1", "p2", "SKU_77"}

FIXTURE_REPORT = """## Shortlist

Our top pick is the Nordic Calm (AP-2001); the Breeze Mini (AP-1001) is the budget choice.
A humidifier such as HM-4001 can help in winter. Avoid AP-9999, which is not sold here.

| product_id | note |
|---|---|
| AP-2001 | quietest |
| p2 | spare filter |

Accessory: product_id: SKU_77.
"""


def test_eprod_fixture():
    res = effective_product_count(FIXTURE_REPORT, CATALOG)
    assert res.count == 5
    assert set(res.distinct_valid_ids) == {"AP-1001", "AP-2001", "HM-4001", "p2", "SKU_77"}


def test_eprod_examples():
    assert effective_product_count("p1, p1 and p2", CATALOG).count == 2
    assert effective_product_count("only bogus here", CATALOG).count == 0
    assert effective_product_count("AP-1001x is not AP-1001", {"AP-1001"}).count == 1
    assert effective_product_count("xAP-1001", {"AP-1001"}).count == 0


@given(st.lists(st.sampled_from(sorted(CATALOG) + ["bogus", "word", "AP-9"]), max_size=20), st.randoms())
@settings(max_examples=100)
def test_eprod_duplication_invariant(tokens, rnd):
    text = " ".join(tokens)
    base = effective_product_count(text, CATALOG)
    if tokens:
        dup = list(tokens)
        k = rnd.randrange(len(dup))
        dup.insert(rnd.randrange(len(dup) + 1), dup[k])
        assert effective_product_count(" ".join(dup), CATALOG).count == base.count
    assert set(base.distinct_valid_ids) <= CATALOG
    assert len(set(base.distinct_valid_ids)) == len(base.distinct_valid_ids)


# -- benchmark ----------------------------------------------------------------------

def fixed_judge(target_score: int, ref_score: int):
    def policy(req):
        prompt = req.messages[1].content
        names = re.findall(r"^- (\w+):", prompt.split("## Criteria", 1)[1], re.M)
        a_is_target = prompt.index("TGT") < prompt.index("REF")
        a, b = (target_score, ref_score) if a_is_target else (ref_score, target_score)
        return judge_reply(names, a, b)
    return policy


def test_benchmark_parity():
    rep = benchmark([BenchmarkItem("q1", "TGT AP-1001", "REF", rubric())], CATALOG,
                    policy_gateway(fixed_judge(5, 5)))
    assert rep.summary["overall"] == 50.0 and rep.summary["eprod"] == 1.0
    assert "Overall 50.00" in rep.table()


def test_benchmark_two_item_mean():
    # item 1: 4 vs 6 -> 0.4; item 2: 6 vs 4 -> 0.6
    items = [BenchmarkItem("q1", "TGT one", "REF", rubric()), BenchmarkItem("q2", "TGT two", "REF", rubric())]
    gws = {"q1": fixed_judge(4, 6), "q2": fixed_judge(6, 4)}

    def policy(req):
        key = "q1" if "TGT one" in req.messages[1].content else "q2"
        return gws[key](req)

    rep = benchmark(items, CATALOG, policy_gateway(policy))
    assert [it.race.s_final for it in rep.items] == pytest.approx([0.4, 0.6], abs=1e-12)
    assert rep.summary["overall"] == pytest.approx(50.0, abs=1e-9)


def test_benchmark_error_rows_do_not_abort():
    items = [BenchmarkItem("q1", "TGT", "REF", rubric()), BenchmarkItem("q2", "TGT", "REF", None, error="missing rubric"),
             BenchmarkItem("q3", "TGT", "REF", rubric())]
    calls = {"n": 0}

    def policy(req):
        calls["n"] += 1
        return "garbage" if calls["n"] > 4 else fixed_judge(5, 5)(req)

    rep = benchmark(items, CATALOG, policy_gateway(policy))
    assert [it.error is None for it in rep.items] == [True, False, False]
    assert rep.summary["errors"] == 2 and rep.summary["overall"] == 50.0
    assert rep.items[1].to_dict() == {"query_id": "q2", "error": "missing rubric"}


def test_benchmark_empty():
    with pytest.raises(EmptyBatch):
        benchmark([], CATALOG, scripted())
