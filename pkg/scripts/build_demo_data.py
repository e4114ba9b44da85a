"""Regenerate the bundled demo fixtures under src/prodresearch/data/demo.

The scripted replies walk one session through a rejected plan, four approved
tool calls, an approved answer gate, and a rejected then approved report.
The judge replies give both reports identical scores (parity).
"""

from __future__ import annotations

import json
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "prodresearch" / "data" / "demo"


def dump(name: str, rows: list[dict]) -> None:
    with open(OUT / name, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n")


PRODUCTS = [
    {"product_id": "AP-1001", "shop_id": "shop-breeze", "product_name": "Breeze Mini HEPA Air Purifier",
     "price": 129, "number_of_reviews": 812, "category": "air purifier",
     "attributes": {"noise": "22 dB sleep mode", "cadr": "110 m3/h", "room": "up to 18 m2", "filter": "H13 HEPA"},
     "description": "Compact HEPA purifier with a quiet sleep mode and no ionizer, suited to bedrooms and nurseries.",
     "reviews": [{"rating": 5, "text": "Silent at night in our baby room."},
                 {"rating": 4, "text": "Filters cost 25 each, replace every 6 months."}]},
    {"product_id": "AP-1002", "shop_id": "shop-breeze", "product_name": "Breeze Pro HEPA Air Purifier",
     "price": 249, "number_of_reviews": 430, "category": "air purifier",
     "attributes": {"noise": "24 dB sleep mode", "cadr": "260 m3/h", "room": "up to 40 m2", "filter": "H13 HEPA + carbon"},
     "description": "Larger room purifier with carbon layer for odours and an air quality sensor.",
     "reviews": [{"rating": 5, "text": "Handles our open living room easily."}]},
    {"product_id": "AP-2001", "shop_id": "shop-nordic", "product_name": "Nordic Calm Nursery Purifier",
     "price": 189, "number_of_reviews": 265, "category": "air purifier",
     "attributes": {"noise": "19 dB night mode", "cadr": "150 m3/h", "room": "up to 22 m2", "filter": "H13 HEPA"},
     "description": "Nursery purifier with a dimmable night light, child lock and ozone-free operation.",
     "reviews": [{"rating": 5, "text": "Quietest one we tried, the night light is a bonus."},
                 {"rating": 3, "text": "Replacement filters are hard to find locally."}]},
    {"product_id": "AP-3001", "shop_id": "shop-value", "product_name": "ValueAir Ionic Purifier",
     "price": 69, "number_of_reviews": 1530, "category": "air purifier",
     "attributes": {"noise": "35 dB", "cadr": "90 m3/h", "room": "up to 12 m2", "filter": "ionizer + pre-filter"},
     "description": "Budget ionic purifier; emits small amounts of ozone.",
     "reviews": [{"rating": 3, "text": "Cheap but noticeably loud."}]},
    {"product_id": "HM-4001", "shop_id": "shop-nordic", "product_name": "Nordic Mist Cool Humidifier",
     "price": 79, "number_of_reviews": 640, "category": "humidifier",
     "attributes": {"noise": "26 dB", "tank": "3 L"},
     "description": "Cool mist humidifier for bedrooms and nurseries."},
    {"product_id": "AP-5001", "shop_id": "shop-pure", "product_name": "PureLeaf Smart HEPA Purifier",
     "price": 299, "number_of_reviews": 120, "category": "air purifier",
     "attributes": {"noise": "21 dB sleep mode", "cadr": "200 m3/h", "room": "up to 30 m2", "filter": "H14 HEPA"},
     "description": "App-connected HEPA purifier with PM2.5 display and auto mode; no ionizer.",
     "reviews": [{"rating": 4, "text": "Great sensor, app occasionally disconnects."}]},
]

USERS = [
    {"user_id": "u001", "events": [
        {"kind": "purchase", "timestamp": "2024-03-02T10:15:00", "payload": "Baby monitor with night vision, 89"},
        {"kind": "review", "timestamp": "2024-03-20T21:40:00",
         "payload": "Returned a humidifier because the fan hum kept waking the baby."},
        {"kind": "dialogue", "timestamp": "2024-05-11T08:05:00",
         "payload": "Asked a seller whether their purifier produces ozone."},
        {"kind": "purchase", "timestamp": "2024-06-01T19:30:00", "payload": "Organic crib mattress, 240"},
    ]},
]

WEB = [
    {"query": "ozone free quiet air purifier nursery", "results": [
        {"title": "Choosing an air purifier for a nursery", "snippet": "Look for true HEPA, no ionizer, under 25 dB.",
         "url": "https://example.org/nursery-purifiers"},
        {"title": "Why ionizers are a poor fit for baby rooms", "snippet": "Ionizers can emit ozone.",
         "url": "https://example.org/ionizer-ozone"},
    ]},
    {"url": "https://example.org/nursery-purifiers",
     "page_text": "A nursery purifier should use a true HEPA filter (H13 or better), avoid ionizers because they can "
                  "emit ozone, stay under about 25 dB in sleep mode, and have a CADR of at least 1.5 times the room "
                  "area in square metres per hour times the ceiling height."},
]

QUERY = ("I have a 15 m2 nursery and a light-sleeping 6 month old; which ozone-free HEPA air purifier under 200 "
         "dollars is quiet enough for night use, and how do filter costs compare over two years?")

PERSONA = {"persona": {
    "profile_text": "A first-time parent who researches carefully before buying, is sensitive to noise and chemical "
                    "safety around the baby, and prefers mid-priced products with low running costs.",
    "facets": {"budget": "mid-range", "expertise": "informed layperson",
               "priorities": ["quiet operation", "ozone-free", "running cost"]}},
    "query": QUERY}

RUBRIC = {"dimensions": {
    "comprehensiveness": {"weight": 0.3, "criteria": [
        {"name": "candidate_coverage", "explanation": "Covers several eligible purifiers under budget.", "weight": 0.6},
        {"name": "running_costs", "explanation": "Includes filter prices and replacement intervals.", "weight": 0.4}]},
    "insight": {"weight": 0.25, "criteria": [
        {"name": "noise_tradeoffs", "explanation": "Explains noise versus airflow trade-offs for a sleeping baby.",
         "weight": 0.5},
        {"name": "safety_reasoning", "explanation": "Explains why ozone-emitting ionizers are excluded.", "weight": 0.5}]},
    "instruction_following": {"weight": 0.3, "criteria": [
        {"name": "budget_respected", "explanation": "Every recommendation is under 200 dollars.", "weight": 0.5},
        {"name": "room_size_fit", "explanation": "Recommendations fit a 15 m2 room.", "weight": 0.5}]},
    "readability": {"weight": 0.15, "criteria": [
        {"name": "clear_comparison", "explanation": "Uses a comparison table or equivalent structure.", "weight": 0.5},
        {"name": "actionable_verdict", "explanation": "Ends with a clear recommendation.", "weight": 0.5}]},
}}


def think(text: str) -> str:
    return f"<think>{text}</think>"


def tool(name: str, arguments: dict) -> str:
    return "<tool_call>\n" + json.dumps({"name": name, "arguments": arguments}) + "\n</tool_call>"


def verdict(approved: bool, feedback: str, reason: str) -> str:
    return (f"<supervisor_response>\n<approved>{'true' if approved else 'false'}</approved>\n"
            f"<feedback>{feedback}</feedback>\n<reason>{reason}</reason>\n</supervisor_response>")


DRAFT = ("Recommended: Nordic Calm Nursery Purifier (AP-2001) at 189. It is HEPA, ozone-free and very quiet.")
FINAL = (
    "## Recommendation for a 15 m2 nursery\n\n"
    "| product_id | Name | Price | Sleep noise | CADR | 2-year filter cost |\n"
    "|---|---|---|---|---|---|\n"
    "| AP-2001 | Nordic Calm Nursery Purifier | 189 | 19 dB | 150 m3/h | about 4 filters, availability limited |\n"
    "| AP-1001 | Breeze Mini HEPA Air Purifier | 129 | 22 dB | 110 m3/h | 4 x 25 = 100 |\n\n"
    "Excluded: ValueAir Ionic Purifier (AP-3001) emits ozone; Breeze Pro (AP-1002) and PureLeaf (AP-5001) exceed "
    "the budget.\n\n"
    "Verdict: choose AP-2001 for the lowest night noise; choose AP-1001 if filter availability and the lower total "
    "cost matter more. Both are H13 HEPA with no ionizer and cover a 15 m2 room.")

RESEARCH = [
    think("I will recommend a purifier."),
    think("Plan: 1) check web guidance on nursery purifiers (HEPA grade, ozone, noise); 2) search the catalog for "
          "HEPA purifiers under 200; 3) inspect candidates for sleep noise, room size and filter cost; "
          "4) write a comparison with a two-year cost estimate."),
    think("Start with external guidance.") + "\n" + tool("web_search", {"queries": ["ozone free quiet air purifier nursery"]}),
    think("Read the nursery guide for thresholds.") + "\n" + tool(
        "web_visit", {"urls": ["https://example.org/nursery-purifiers"], "goal": "noise, filter and ozone thresholds"}),
    think("Now search the catalog.") + "\n" + tool("product_search", {"query": "HEPA air purifier nursery quiet",
                                                                       "price": "0-200"}),
    think("Inspect the eligible candidates.") + "\n" + tool(
        "view_product_details", {"product_ids": ["AP-1001", "AP-2001", "AP-3001"],
                                 "goal": "sleep noise, room size, ozone, filter cost"}),
    think("I have enough evidence to answer.") + "\n" + f"<answer>{DRAFT}</answer>",
    think("Add the comparison table, two-year filter costs and exclusions.") + "\n" + f"<answer>{FINAL}</answer>",
]

SUPERVISOR = [
    verdict(False, "The plan is empty. Lay out concrete research steps covering safety, noise and running costs.",
            "No actionable plan."),
    verdict(True, "", "Plan covers the user's constraints."),
    verdict(True, "", "Relevant external guidance."),
    verdict(True, "", "Source is on topic."),
    verdict(True, "", "Catalog search with the budget filter."),
    verdict(True, "", "Candidates are worth inspecting."),
    verdict(True, "", "Enough evidence was collected."),
    verdict(False, "The report lacks the two-year filter cost comparison and does not explain exclusions. Add a "
                   "comparison table and a clear verdict.", "Misses explicit requirements."),
    verdict(True, "", "Report satisfies the rubric."),
]

EXTRACTOR = [
    {"rational": "The guide states thresholds.", "evidence": "true HEPA (H13 or better), avoid ionizers, under about "
     "25 dB in sleep mode", "summary": "Use H13+ HEPA, no ionizer, below 25 dB."},
    {"rational": "Product page.", "evidence": "22 dB sleep mode; up to 18 m2; filters 25 each every 6 months",
     "summary": "Quiet, fits 15 m2, filter 25 per 6 months."},
    {"rational": "Product page.", "evidence": "19 dB night mode; up to 22 m2; ozone-free; filters hard to find",
     "summary": "Quietest, fits the room, filter availability limited."},
    {"rational": "Product page.", "evidence": "ionizer; emits small amounts of ozone; 35 dB",
     "summary": "Emits ozone and is loud; unsuitable."},
]

INTERNALIZER = [
    think("A bare intention to recommend would skip the baby's safety and noise constraints, so I need a concrete "
          "plan first. Plan: 1) check web guidance on nursery purifiers (HEPA grade, ozone, noise); 2) search the "
          "catalog for HEPA purifiers under 200; 3) inspect candidates for sleep noise, room size and filter cost; "
          "4) write a comparison with a two-year cost estimate."),
    think("A one-line pick would not show running costs or why other models were ruled out, so the report needs a "
          "table, two-year filter costs and explicit exclusions.") + "\n" + f"<answer>{FINAL}</answer>",
]

CRITERIA = {
    "comprehensiveness": ["candidate_coverage", "running_costs"],
    "depth": ["noise_tradeoffs", "safety_reasoning"],
    "instruction_following": ["budget_respected", "room_size_fit"],
    "readability": ["clear_comparison", "actionable_verdict"],
}

TARGET = ("For a quiet nursery, consider the Breeze Mini (AP-1001) at 129 or the Nordic Calm (AP-2001) at 189. "
          "Avoid ionic models such as AP-3001.")


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    dump("corpus.jsonl", PRODUCTS)
    dump("users.jsonl", USERS)
    dump("web.jsonl", WEB)
    script = [
        {"agent_tag": "user_agent", "sequence_index": 0, "response_text": json.dumps(PERSONA)},
        {"agent_tag": "user_agent", "sequence_index": 1, "response_text": json.dumps(RUBRIC)},
    ]
    script += [{"agent_tag": "research_agent", "sequence_index": i, "response_text": t} for i, t in enumerate(RESEARCH)]
    script += [{"agent_tag": "supervisor", "sequence_index": i, "response_text": t} for i, t in enumerate(SUPERVISOR)]
    script += [{"agent_tag": "extractor", "sequence_index": i, "response_text": json.dumps(e)}
               for i, e in enumerate(EXTRACTOR)]
    script += [{"agent_tag": "internalizer", "sequence_index": i, "response_text": t} for i, t in enumerate(INTERNALIZER)]
    for i, names in enumerate(CRITERIA.values()):
        scores = [{"criterion": n, "report_a": 7, "report_b": 7, "rationale": "Both reports are comparable here."}
                  for n in names]
        script.append({"agent_tag": "judge", "sequence_index": i, "response_text": json.dumps({"scores": scores})})
    dump("script.jsonl", script)
    dump("targets.jsonl", [{"query_id": "q-u001", "target_report": TARGET}])


if __name__ == "__main__":
    main()
