"""Okapi BM25 over an in-memory inverted index."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

_NON_ALNUM = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on runs of non-alphanumerics. No stemming, no stopwords."""
    return [t for t in _NON_ALNUM.split(text.lower()) if t]


@dataclass
class BM25Index:
    k1: float = 0.9
    b: float = 0.4
    postings: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    doc_lengths: list[int] = field(default_factory=list)
    id_map: list[str] = field(default_factory=list)

    @property
    def doc_count(self) -> int:
        return len(self.doc_lengths)

    @property
    def average_doc_length(self) -> float:
        return sum(self.doc_lengths) / self.doc_count if self.doc_count else 0.0

    def add(self, doc_id: str, text: str) -> None:
        ordinal = len(self.doc_lengths)
        tokens = tokenize(text)
        self.doc_lengths.append(len(tokens))
        self.id_map.append(doc_id)
        for term, tf in Counter(tokens).items():
            self.postings.setdefault(term, []).append((ordinal, tf))

    @classmethod
    def build(cls, docs: Iterable[tuple[str, str]], *, k1: float = 0.9, b: float = 0.4) -> BM25Index:
        index = cls(k1=k1, b=b)
        for doc_id, text in docs:
            index.add(doc_id, text)
        return index

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))

    def scores(self, query: str) -> dict[int, float]:
        """Score every document sharing a term with the query.

        Each query token contributes once per occurrence in the query.
        """
        avgdl = self.average_doc_length
        acc: dict[int, float] = {}
        for term in tokenize(query):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for ordinal, tf in plist:
                norm = self.k1 * (1.0 - self.b + self.b * self.doc_lengths[ordinal] / avgdl)
                acc[ordinal] = acc.get(ordinal, 0.0) + idf * tf * (self.k1 + 1.0) / (tf + norm)
        return acc

    def to_dict(self) -> dict:
        return {
            "k1": self.k1,
            "b": self.b,
            "id_map": self.id_map,
            "doc_lengths": self.doc_lengths,
            "postings": {t: [list(p) for p in plist] for t, plist in sorted(self.postings.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> BM25Index:
        return cls(
            k1=d["k1"],
            b=d["b"],
            postings={t: [(o, tf) for o, tf in plist] for t, plist in d["postings"].items()},
            doc_lengths=list(d["doc_lengths"]),
            id_map=list(d["id_map"]),
        )
