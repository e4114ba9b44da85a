"""The research agent's four tools over a web environment and a product catalog."""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from html.parser import HTMLParser
from pathlib import Path
from typing import Any, Iterable, Protocol
from urllib.parse import urlparse

import httpx

from .bm25 import BM25Index
from .llm import Gateway, make_request
from .model import Message, Role, ToolCallRecord, iter_jsonl
from .parsers import EMPTY_EXTRACT, ExtractorResult, ParseError, parse_extractor
from .templates import TemplateSet

logger = logging.getLogger(__name__)

MAX_SEARCH_HITS = 50
MAX_WEB_RESULTS = 10
DEFAULT_CONTENT_WINDOW = 40_000
EXTRACTOR_SYSTEM = "You are a precise information extraction assistant. Reply with JSON only."


class ToolError(ValueError):
    """A tool invocation was rejected; rendered back to the agent as an error."""


class EmptyGoal(ToolError):
    pass


class EmptyIdList(ToolError):
    pass


class EmptyUrlList(ToolError):
    pass


class EmptyQueryList(ToolError):
    pass


class BadPriceFilter(ToolError):
    def __init__(self, text: str):
        super().__init__(f'bad price filter {text!r}; use "min-max" or "min-"')
        self.text = text


class CorpusError(ValueError):
    pass


class DuplicateProductId(CorpusError):
    def __init__(self, product_id: str, line: int):
        super().__init__(f"duplicate product_id {product_id!r} on line {line}")
        self.product_id = product_id
        self.line = line


class MalformedRecord(CorpusError):
    def __init__(self, line: int, detail: str):
        super().__init__(f"malformed product record on line {line}: {detail}")
        self.line = line


class FetchError(Exception):
    pass


# ---------------------------------------------------------------------------
# catalog


@dataclass(frozen=True)
class Review:
    rating: int
    text: str


_KNOWN_FIELDS = {
    "product_id", "shop_id", "product_name", "price", "number_of_reviews", "category",
    "attributes", "options", "description", "reviews", "price_history",
}


@dataclass(frozen=True)
class ProductRecord:
    product_id: str
    shop_id: str
    product_name: str
    price: Decimal
    number_of_reviews: int = 0
    category: str = ""
    attributes: dict[str, str] = field(default_factory=dict)
    options: tuple[str, ...] = ()
    description: str = ""
    reviews: tuple[Review, ...] = ()
    price_history: tuple[dict[str, Any], ...] = ()
    extra: dict[str, Any] = field(default_factory=dict)

    def index_text(self) -> str:
        return " ".join([self.product_name, self.category, *self.attributes.values(), self.description])

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ProductRecord:
        """Raises ValueError/TypeError/KeyError on malformed input."""
        for key in ("product_id", "shop_id", "product_name"):
            if not isinstance(d.get(key), str) or not d[key]:
                raise ValueError(f"{key} must be a non-empty string")
        try:
            price = Decimal(str(d["price"]))
        except (KeyError, InvalidOperation):
            raise ValueError("price missing or not a number") from None
        if not price.is_finite() or price < 0:
            raise ValueError("price must be a finite non-negative number")
        n_reviews = d.get("number_of_reviews", 0)
        if not isinstance(n_reviews, int) or isinstance(n_reviews, bool) or n_reviews < 0:
            raise ValueError("number_of_reviews must be a non-negative integer")
        attrs = d.get("attributes", {})
        if not isinstance(attrs, dict):
            raise ValueError("attributes must be an object")
        reviews = []
        for r in d.get("reviews", []):
            rating = r["rating"]
            if not isinstance(rating, int) or not 1 <= rating <= 5:
                raise ValueError(f"review rating {rating!r} outside 1..5")
            reviews.append(Review(rating, str(r.get("text", ""))))
        return cls(
            product_id=d["product_id"],
            shop_id=d["shop_id"],
            product_name=d["product_name"],
            price=price,
            number_of_reviews=n_reviews,
            category=str(d.get("category", "")),
            attributes={str(k): str(v) for k, v in attrs.items()},
            options=tuple(str(o) for o in d.get("options", [])),
            description=str(d.get("description", "")),
            reviews=tuple(reviews),
            price_history=tuple(d.get("price_history", [])),
            extra={k: v for k, v in d.items() if k not in _KNOWN_FIELDS},
        )

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "product_id": self.product_id,
            "shop_id": self.shop_id,
            "product_name": self.product_name,
            "price": _price_json(self.price),
            "number_of_reviews": self.number_of_reviews,
            "category": self.category,
            "attributes": self.attributes,
            "options": list(self.options),
            "description": self.description,
            "reviews": [{"rating": r.rating, "text": r.text} for r in self.reviews],
        }
        if self.price_history:
            d["price_history"] = list(self.price_history)
        d.update(self.extra)
        return d

    def render(self) -> str:
        lines = [
            f"Product ID: {self.product_id}",
            f"Shop ID: {self.shop_id}",
            f"Name: {self.product_name}",
            f"Category: {self.category}",
            f"Price: {self.price}",
            f"Number of reviews: {self.number_of_reviews}",
        ]
        if self.price_history:
            lines.append("Price history: " + json.dumps(list(self.price_history), ensure_ascii=False))
        if self.attributes:
            lines.append("Attributes:")
            lines += [f"- {k}: {v}" for k, v in self.attributes.items()]
        if self.options:
            lines.append("Options:")
            lines += [f"- {o}" for o in self.options]
        if self.description:
            lines += ["Description:", self.description]
        if self.reviews:
            lines.append("Reviews:")
            lines += [f"- [{r.rating}/5] {r.text}" for r in self.reviews]
        return "\n".join(lines)


def _price_json(price: Decimal) -> int | float:
    return int(price) if price == price.to_integral_value() else float(price)


@dataclass(frozen=True)
class SearchHit:
    product_id: str
    shop_id: str
    product_name: str
    price: Decimal
    number_of_reviews: int
    score: float


@dataclass(frozen=True)
class PriceFilter:
    min: Decimal
    max: Decimal | None = None

    def __post_init__(self) -> None:
        if self.min < 0 or (self.max is not None and self.max < self.min):
            raise BadPriceFilter(f"{self.min}-{'' if self.max is None else self.max}")

    _PATTERN = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*-\s*(\d+(?:\.\d+)?)?\s*$")

    @classmethod
    def parse(cls, text: str) -> PriceFilter:
        m = cls._PATTERN.match(text)
        if m is None:
            raise BadPriceFilter(text)
        lo = Decimal(m.group(1))
        hi = Decimal(m.group(2)) if m.group(2) is not None else None
        if hi is not None and hi < lo:
            raise BadPriceFilter(text)
        return cls(lo, hi)

    def admits(self, price: Decimal) -> bool:
        return price >= self.min and (self.max is None or price <= self.max)


class Catalog:
    """Product records plus the BM25 index over them. Immutable after ingest."""

    def __init__(self, records: Iterable[ProductRecord], *, k1: float = 0.9, b: float = 0.4,
                 index: BM25Index | None = None):
        self.records: dict[str, ProductRecord] = {}
        for r in records:
            self.records[r.product_id] = r
        self.index = index or BM25Index.build(((r.product_id, r.index_text()) for r in self.records.values()),
                                              k1=k1, b=b)

    def __contains__(self, product_id: str) -> bool:
        return product_id in self.records

    def __len__(self) -> int:
        return len(self.records)

    def get(self, product_id: str) -> ProductRecord | None:
        return self.records.get(product_id)

    def search(self, query: str, shop_id: str | None = None, price: PriceFilter | str | None = None,
               limit: int = MAX_SEARCH_HITS) -> list[SearchHit]:
        if isinstance(price, str):
            price = PriceFilter.parse(price)
        hits = []
        for ordinal, score in self.index.scores(query).items():
            rec = self.records[self.index.id_map[ordinal]]
            if shop_id is not None and rec.shop_id != shop_id:
                continue
            if price is not None and not price.admits(rec.price):
                continue
            hits.append(SearchHit(rec.product_id, rec.shop_id, rec.product_name, rec.price,
                                  rec.number_of_reviews, score))
        hits.sort(key=lambda h: (-h.score, h.product_id))
        return hits[:limit]

    def save(self, path: str | Path) -> None:
        doc = {"products": [r.to_dict() for r in self.records.values()], "index": self.index.to_dict()}
        Path(path).write_text(json.dumps(doc, sort_keys=True, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Catalog:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        records = [ProductRecord.from_dict(d) for d in doc["products"]]
        return cls(records, index=BM25Index.from_dict(doc["index"]))


def ingest_corpus(path: str | Path, *, k1: float = 0.9, b: float = 0.4) -> Catalog:
    """Read a line-delimited product corpus and index it."""
    records: list[ProductRecord] = []
    seen: set[str] = set()
    for lineno, line in iter_jsonl(path):
        try:
            doc = json.loads(line)
            if not isinstance(doc, dict):
                raise ValueError("record is not an object")
            rec = ProductRecord.from_dict(doc)
        except (ValueError, TypeError, KeyError) as exc:
            raise MalformedRecord(lineno, str(exc)) from None
        if rec.product_id in seen:
            raise DuplicateProductId(rec.product_id, lineno)
        seen.add(rec.product_id)
        records.append(rec)
    return Catalog(records, k1=k1, b=b)


# ---------------------------------------------------------------------------
# web


@dataclass(frozen=True)
class WebResult:
    title: str
    snippet: str
    url: str

    def __post_init__(self) -> None:
        if not is_valid_url(self.url):
            raise ValueError(f"invalid url {self.url!r}")


def is_valid_url(url: str) -> bool:
    parsed = urlparse(url)
    return parsed.scheme in ("http", "https") and bool(parsed.netloc)


class WebBackend(Protocol):
    def search(self, query: str) -> list[WebResult]: ...

    def fetch(self, url: str) -> str: ...


class FixtureWeb:
    """Web environment backed by recorded query results and page texts."""

    def __init__(self, results: dict[str, list[WebResult]] | None = None, pages: dict[str, str] | None = None):
        self.results = results or {}
        self.pages = pages or {}
        self.misses: list[str] = []

    @classmethod
    def load(cls, path: str | Path) -> FixtureWeb:
        web = cls()
        for lineno, line in iter_jsonl(path):
            rec = json.loads(line)
            if "query" in rec:
                web.results[rec["query"]] = [WebResult(r["title"], r.get("snippet", ""), r["url"])
                                             for r in rec.get("results", [])]
            elif "url" in rec:
                web.pages[rec["url"]] = rec["page_text"]
            else:
                raise ValueError(f"web fixture line {lineno}: needs 'query' or 'url'")
        return web

    def search(self, query: str) -> list[WebResult]:
        if query not in self.results:
            logger.info("web fixture miss for query %r", query)
            self.misses.append(query)
            return []
        return list(self.results[query])

    def fetch(self, url: str) -> str:
        if url not in self.pages:
            raise FetchError(f"no fixture page for {url}")
        return self.pages[url]


class _TextExtractor(HTMLParser):
    _SKIP = {"script", "style", "noscript", "template", "svg", "head"}
    _BLOCK = {"p", "div", "br", "li", "tr", "h1", "h2", "h3", "h4", "h5", "h6", "section", "article", "table"}

    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self._skip_depth = 0

    def handle_starttag(self, tag, attrs):
        if tag in self._SKIP:
            self._skip_depth += 1
        elif tag in self._BLOCK:
            self.parts.append("\n")

    def handle_endtag(self, tag):
        if tag in self._SKIP and self._skip_depth:
            self._skip_depth -= 1
        elif tag in self._BLOCK:
            self.parts.append("\n")

    def handle_data(self, data):
        if not self._skip_depth:
            self.parts.append(data)


def html_to_text(html: str) -> str:
    parser = _TextExtractor()
    parser.feed(html)
    parser.close()
    lines = (re.sub(r"[ \t\r\f\v]+", " ", ln).strip() for ln in "".join(parser.parts).split("\n"))
    return "\n".join(ln for ln in lines if ln)


class LiveWeb:
    """Serper-style search plus plain HTTP GET. Off unless explicitly enabled."""

    def __init__(self, *, search_endpoint: str = "https://google.serper.dev/search", api_key: str | None = None,
                 client: httpx.Client | None = None, timeout: float = 30.0):
        self.search_endpoint = search_endpoint
        self._api_key = api_key if api_key is not None else os.environ.get("SERPER_API_KEY", "")
        self._client = client or httpx.Client(timeout=timeout, follow_redirects=True)

    def search(self, query: str) -> list[WebResult]:
        from .llm import TransportError

        try:
            resp = self._client.post(self.search_endpoint, json={"q": query, "num": MAX_WEB_RESULTS},
                                     headers={"X-API-KEY": self._api_key})
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise TransportError(f"web search failed: {exc}") from exc
        out = []
        for item in resp.json().get("organic", []):
            url = item.get("link", "")
            if is_valid_url(url):
                out.append(WebResult(item.get("title", ""), item.get("snippet", ""), url))
        return out

    def fetch(self, url: str) -> str:
        try:
            resp = self._client.get(url)
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise FetchError(str(exc)) from exc
        if "html" in resp.headers.get("content-type", "html"):
            return html_to_text(resp.text)
        return resp.text


# ---------------------------------------------------------------------------
# environment


@dataclass(frozen=True)
class ExtractItem:
    """Per-id / per-url outcome: status is ok, not_found, fetch_error or extract_error."""

    key: str
    status: str
    extract: ExtractorResult = EMPTY_EXTRACT


@dataclass(frozen=True)
class SearchGroup:
    query: str
    results: tuple[WebResult, ...]


class ToolEnvironment:
    def __init__(self, catalog: Catalog, web: WebBackend, gateway: Gateway, templates: TemplateSet, *,
                 content_window: int = DEFAULT_CONTENT_WINDOW):
        self.catalog = catalog
        self.web = web
        self.gateway = gateway
        self.templates = templates
        self.content_window = content_window

    def _extract(self, content: str, goal: str) -> ExtractorResult:
        prompt = self.templates.render("extractor", webpage_content=content, goal=goal)
        req = make_request("extractor", [Message(Role.SYSTEM, EXTRACTOR_SYSTEM), Message(Role.USER, prompt)])
        return parse_extractor(self.gateway.complete(req).text)

    def product_search(self, query: str, shop_id: str | None = None, price: str | PriceFilter | None = None
                       ) -> list[SearchHit]:
        return self.catalog.search(query, shop_id=shop_id, price=price)

    def view_product_details(self, product_ids: list[str], goal: str) -> list[ExtractItem]:
        if not goal.strip():
            raise EmptyGoal("goal is required")
        if not product_ids:
            raise EmptyIdList("product_ids is empty")
        out = []
        for pid in product_ids:
            rec = self.catalog.get(pid)
            if rec is None:
                out.append(ExtractItem(pid, "not_found"))
                continue
            try:
                out.append(ExtractItem(pid, "ok", self._extract(rec.render(), goal)))
            except ParseError as exc:
                logger.warning("extractor reply for %s unusable: %s", pid, exc)
                out.append(ExtractItem(pid, "extract_error"))
        return out

    def web_search(self, queries: list[str]) -> list[SearchGroup]:
        if not queries:
            raise EmptyQueryList("queries is empty")
        return [SearchGroup(q, tuple(self.web.search(q)[:MAX_WEB_RESULTS])) for q in queries]

    def web_visit(self, urls: list[str], goal: str) -> list[ExtractItem]:
        if not goal.strip():
            raise EmptyGoal("goal is required")
        if not urls:
            raise EmptyUrlList("urls is empty")
        out = []
        for url in urls:
            try:
                text = self.web.fetch(url)
            except FetchError as exc:
                logger.info("fetch failed for %s: %s", url, exc)
                out.append(ExtractItem(url, "fetch_error"))
                continue
            try:
                out.append(ExtractItem(url, "ok", self._extract(text[: self.content_window], goal)))
            except ParseError as exc:
                logger.warning("extractor reply for %s unusable: %s", url, exc)
                out.append(ExtractItem(url, "extract_error"))
        return out

    def execute(self, call: ToolCallRecord) -> str:
        """Run a tool call and render its result as tool-message content."""
        args = call.arguments
        try:
            if call.tool_name == "product_search":
                return render_hits(args["query"], self.product_search(args["query"], args.get("shop_id"),
                                                                      args.get("price")))
            if call.tool_name == "view_product_details":
                return render_extracts(self.view_product_details(args["product_ids"], args["goal"]))
            if call.tool_name == "web_search":
                return render_search_groups(self.web_search(args["queries"]))
            if call.tool_name == "web_visit":
                return render_extracts(self.web_visit(args["urls"], args["goal"]))
        except ToolError as exc:
            return f"Error: {exc}"
        raise AssertionError(f"unhandled tool {call.tool_name}")


def render_hits(query: str, hits: list[SearchHit]) -> str:
    if not hits:
        return f'No products found for query "{query}".'
    lines = [f'Found {len(hits)} products for query "{query}":']
    for h in hits:
        lines.append(
            f"- product_id: {h.product_id} | shop_id: {h.shop_id} | product_name: {h.product_name}"
            f" | price: {h.price} | number_of_reviews: {h.number_of_reviews}"
        )
    return "\n".join(lines)


def render_search_groups(groups: list[SearchGroup]) -> str:
    blocks = []
    for g in groups:
        lines = [f'## Results for "{g.query}"']
        if not g.results:
            lines.append("No results.")
        for i, r in enumerate(g.results, start=1):
            lines += [f"{i}. {r.title}", f"   URL: {r.url}", f"   {r.snippet}"]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def render_extracts(items: list[ExtractItem]) -> str:
    blocks = []
    for it in items:
        if it.status == "ok":
            blocks.append(f"### {it.key}\nEvidence: {it.extract.evidence}\nSummary: {it.extract.summary}")
        else:
            blocks.append(f"### {it.key}\nStatus: {it.status}")
    return "\n\n".join(blocks)
