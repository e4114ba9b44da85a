"""Chat-completion gateway shared by every agent role and the judge.

Two backends: a scripted one that replays canned replies (tests, demo) and a
remote one speaking the usual chat-completions HTTP protocol.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

import httpx

from .model import Message, Role, canonical_json

logger = logging.getLogger(__name__)

AGENT_TAGS = ("user_agent", "research_agent", "supervisor", "extractor", "judge", "internalizer")
WIRE_ROLES = (Role.SYSTEM, Role.USER, Role.ASSISTANT, Role.TOOL)

DEFAULT_TEMPERATURE = {
    "user_agent": 0.7,
    "research_agent": 0.7,
    "supervisor": 0.0,
    "extractor": 0.0,
    "judge": 0.0,
    "internalizer": 0.0,
}
DEFAULT_MAX_OUTPUT_TOKENS = 8192


class GatewayError(Exception):
    """Base class for gateway failures."""


class TransportError(GatewayError):
    """Retryable failure talking to a backend."""


class BackendError(GatewayError):
    """Non-retryable backend failure (bad request, auth, malformed body)."""


class ScriptExhausted(GatewayError):
    pass


class BudgetExceeded(GatewayError):
    pass


class MalformedScript(ValueError):
    def __init__(self, line: int, detail: str):
        super().__init__(f"script line {line}: {detail}")
        self.line = line


@dataclass(frozen=True)
class ChatParams:
    temperature: float = 0.0
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class ChatRequest:
    agent_tag: str
    messages: tuple[Message, ...]
    params: ChatParams = field(default_factory=ChatParams)

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if self.agent_tag not in AGENT_TAGS:
            raise ValueError(f"unknown agent tag {self.agent_tag!r}")
        if not self.messages:
            raise ValueError("request has no messages")
        if self.messages[0].role is not Role.SYSTEM:
            raise ValueError("first request message must be the system prompt")
        for m in self.messages:
            if m.role not in WIRE_ROLES:
                raise ValueError(f"role {m.role.value!r} cannot be sent on the wire")

    def wire_messages(self) -> list[dict[str, str]]:
        return [{"role": m.role.value, "content": m.content} for m in self.messages]

    def digest(self) -> str:
        """Stable hash of the agent tag and message contents."""
        payload = canonical_json({"agent_tag": self.agent_tag, "messages": self.wire_messages()})
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def make_request(agent_tag: str, messages, *, temperature: float | None = None, seed: int | None = None,
                 max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS) -> ChatRequest:
    if temperature is None:
        temperature = DEFAULT_TEMPERATURE.get(agent_tag, 0.0)
    return ChatRequest(agent_tag, tuple(messages), ChatParams(temperature, max_output_tokens, seed))


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: Usage
    backend_id: str
    truncated: bool = False
    attempts: int = 1


class Backend(Protocol):
    backend_id: str

    def send(self, request: ChatRequest) -> ChatResponse: ...


# ---------------------------------------------------------------------------
# scripted backend


@dataclass(frozen=True)
class ScriptEntry:
    response_text: str
    agent_tag: str | None = None
    sequence_index: int | None = None
    prompt_digest: str | None = None


class Script:
    """Canned replies keyed by (agent_tag, sequence_index) or prompt digest."""

    def __init__(self, entries: list[ScriptEntry] | None = None):
        self.entries = list(entries or ())
        self._by_seq: dict[tuple[str, int], ScriptEntry] = {}
        self._by_digest: dict[str, ScriptEntry] = {}
        for e in self.entries:
            if e.prompt_digest is not None:
                if e.prompt_digest in self._by_digest:
                    raise ValueError(f"duplicate prompt_digest {e.prompt_digest}")
                self._by_digest[e.prompt_digest] = e
            else:
                key = (e.agent_tag, e.sequence_index)
                if key in self._by_seq:
                    raise ValueError(f"duplicate match key {key}")
                self._by_seq[key] = e

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, agent_tag: str, sequence_index: int, digest: str) -> ScriptEntry | None:
        return self._by_digest.get(digest) or self._by_seq.get((agent_tag, sequence_index))


def load_script(path: str | Path) -> Script:
    entries: list[ScriptEntry] = []
    seen: set[Any] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedScript(lineno, f"not JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or not isinstance(rec.get("response_text"), str):
                raise MalformedScript(lineno, "missing response_text")
            if "prompt_digest" in rec:
                key: Any = ("digest", rec["prompt_digest"])
                entry = ScriptEntry(rec["response_text"], prompt_digest=str(rec["prompt_digest"]))
            else:
                tag, idx = rec.get("agent_tag"), rec.get("sequence_index")
                if tag not in AGENT_TAGS:
                    raise MalformedScript(lineno, f"unknown agent_tag {tag!r}")
                if not isinstance(idx, int) or isinstance(idx, bool) or idx < 0:
                    raise MalformedScript(lineno, "sequence_index must be a non-negative integer")
                key = (tag, idx)
                entry = ScriptEntry(rec["response_text"], agent_tag=tag, sequence_index=idx)
            if key in seen:
                raise MalformedScript(lineno, f"duplicate match key {key}")
            seen.add(key)
            entries.append(entry)
    return Script(entries)


def synthetic_usage(request: ChatRequest, text: str) -> Usage:
    """Token counts for offline backends: characters / 4 (synthetic, not a tokenizer)."""
    prompt_chars = sum(len(m.content) for m in request.messages)
    return Usage(prompt_chars // 4, len(text) // 4)


class ScriptedBackend:
    """Replays a :class:`Script`. Per-agent counters advance on every call."""

    backend_id = "scripted"

    def __init__(self, script: Script):
        self.script = script
        self._counters: dict[str, int] = {}
        self._lock = threading.Lock()
        self.log: list[ChatRequest] = []

    def send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            idx = self._counters.get(request.agent_tag, 0)
            self._counters[request.agent_tag] = idx + 1
            self.log.append(request)
            entry = self.script.lookup(request.agent_tag, idx, request.digest())
        if entry is None:
            raise ScriptExhausted(f"no scripted reply for {request.agent_tag}#{idx}")
        return ChatResponse(entry.response_text, synthetic_usage(request, entry.response_text), self.backend_id)


class CallableBackend:
    """Backend computed by a function of the request; handy for policies in tests."""

    backend_id = "callable"

    def __init__(self, fn: Callable[[ChatRequest], str]):
        self.fn = fn

    def send(self, request: ChatRequest) -> ChatResponse:
        text = self.fn(request)
        return ChatResponse(text, synthetic_usage(request, text), self.backend_id)


# ---------------------------------------------------------------------------
# remote backend


class RemoteBackend:
    """Standard chat-completions endpoint. Tool results travel as user turns
    since the wire carries no function-calling metadata."""

    def __init__(self, endpoint: str, model: str, *, api_key: str | None = None, timeout: float = 600.0,
                 client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.model = model
        self.backend_id = f"remote:{model}"
        self._api_key = api_key if api_key is not None else os.environ.get("LLM_API_KEY", "")
        self._client = client or httpx.Client(timeout=timeout)

    def payload(self, request: ChatRequest) -> dict[str, Any]:
        messages = []
        for m in request.messages:
            if m.role is Role.TOOL:
                messages.append({"role": "user", "content": f"<tool_response>\n{m.content}\n</tool_response>"})
            else:
                messages.append({"role": m.role.value, "content": m.content})
        body: dict[str, Any] = {
            "model": self.model,
            "messages": messages,
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_output_tokens,
        }
        if request.params.seed is not None:
            body["seed"] = request.params.seed
        return body

    def send(self, request: ChatRequest) -> ChatResponse:
        headers = {"Authorization": f"Bearer {self._api_key}"} if self._api_key else {}
        try:
            resp = self._client.post(self.endpoint, json=self.payload(request), headers=headers)
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unexpected response body: {exc}") from exc
        usage = body.get("usage") or {}
        truncated = choice.get("finish_reason") == "length"
        if not text and not truncated:
            raise BackendError("empty completion without truncation flag")
        return ChatResponse(
            text,
            Usage(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
            self.backend_id,
            truncated=truncated,
        )


# ---------------------------------------------------------------------------


class Gateway:
    """Retrying, budget-tracking front for a backend."""

    def __init__(self, backend: Backend, *, retry_max: int = 3, backoff_base: float = 0.5,
                 token_budget: int | None = None, sleep: Callable[[float], None] = time.sleep):
        self.backend = backend
        self.retry_max = retry_max
        self.backoff_base = backoff_base
        self.token_budget = token_budget
        self._sleep = sleep
        self._lock = threading.Lock()
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.calls = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def usage(self) -> dict[str, int]:
        with self._lock:
            return {"prompt_tokens": self.prompt_tokens, "completion_tokens": self.completion_tokens}

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self.token_budget is not None and self.total_tokens >= self.token_budget:
            raise BudgetExceeded(f"token budget {self.token_budget} already spent")
        attempt = 0
        while True:
            attempt += 1
            try:
                resp = self.backend.send(request)
                break
            except TransportError as exc:
                if attempt > self.retry_max:
                    raise
                delay = self.backoff_base * (2 ** (attempt - 1))
                logger.warning("transport error (%s); retry %d/%d in %.2fs", exc, attempt, self.retry_max, delay)
                self._sleep(delay)
        text = resp.text.rstrip()
        with self._lock:
            self.calls += 1
            self.prompt_tokens += resp.usage.prompt_tokens
            self.completion_tokens += resp.usage.completion_tokens
            total = self.prompt_tokens + self.completion_tokens
        if self.token_budget is not None and total > self.token_budget:
            raise BudgetExceeded(f"token budget {self.token_budget} crossed ({total})")
        return ChatResponse(text, resp.usage, resp.backend_id, resp.truncated, attempt)
