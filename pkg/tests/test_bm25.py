from __future__ import annotations

import math
import random
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prodresearch.bm25 import BM25Index, tokenize


def oracle_scores(docs: dict[str, str], query: str, k1: float = 0.9, b: float = 0.4) -> dict[str, float]:
    """Direct BM25 over whole-document token lists; no postings, no shared code."""
    toks = {d: [t for t in re.split(r"[^0-9a-z]+", text.lower()) if t] for d, text in docs.items()}
    n = len(docs)
    avgdl = sum(len(t) for t in toks.values()) / n
    out: dict[str, float] = {}
    for d, words in toks.items():
        total, hit = 0.0, False
        for q in [t for t in re.split(r"[^0-9a-z]+", query.lower()) if t]:
            tf = words.count(q)
            if tf == 0:
                continue
            hit = True
            df = sum(1 for w in toks.values() if q in w)
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            total += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(words) / avgdl))
        if hit:
            out[d] = total
    return out


def test_tokenize():
    assert tokenize("Wi-Fi 6E, USB-C!!") == ["wi", "fi", "6e", "usb", "c"]
    assert tokenize("  ") == []


def test_hand_computed_score():
    # two docs: "a b" and "a"; query "b". df(b)=1, N=2, avgdl=1.5, doc0 len 2.
    idx = BM25Index.build([("d0", "a b"), ("d1", "a")])
    idf = math.log(1 + (2 - 1 + 0.5) / 1.5)
    expected = idf * 1 * 1.9 / (1 + 0.9 * (1 - 0.4 + 0.4 * 2 / 1.5))
    assert idx.scores("b") == {0: pytest.approx(expected, abs=1e-12)}
    assert idf == pytest.approx(math.log(2.0), abs=1e-15)


def test_unknown_term_scores_nothing():
    assert BM25Index.build([("d0", "a b")]).scores("zzz") == {}


def test_repeated_query_token_counts_twice():
    idx = BM25Index.build([("d0", "a b"), ("d1", "c")])
    once, twice = idx.scores("a")[0], idx.scores("a a")[0]
    assert twice == pytest.approx(2 * once, abs=1e-12)


def test_roundtrip():
    idx = BM25Index.build([("d0", "red shoe"), ("d1", "blue shoe shoe")])
    back = BM25Index.from_dict(idx.to_dict())
    assert back.scores("shoe") == idx.scores("shoe")


VOCAB = [f"w{i}" for i in range(40)]


@given(st.lists(st.lists(st.sampled_from(VOCAB), min_size=1, max_size=25), min_size=1, max_size=30),
       st.lists(st.sampled_from(VOCAB), min_size=1, max_size=5))
@settings(max_examples=200)
def test_matches_oracle(docs, q):
    texts = {f"d{i}": " ".join(ws) for i, ws in enumerate(docs)}
    idx = BM25Index.build(texts.items())
    got = {idx.id_map[o]: s for o, s in idx.scores(" ".join(q)).items()}
    want = oracle_scores(texts, " ".join(q))
    assert got.keys() == want.keys()
    for d in want:
        assert math.isclose(got[d], want[d], rel_tol=0, abs_tol=1e-9)


def test_scores_positive_for_matching_docs():
    rng = random.Random(3)
    texts = [(f"d{i}", " ".join(rng.choices(VOCAB, k=10))) for i in range(50)]
    idx = BM25Index.build(texts)
    assert all(s > 0 for s in idx.scores("w1 w2 w3").values())
