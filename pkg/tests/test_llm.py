from __future__ import annotations

import json

import httpx
import pytest

from prodresearch.llm import (
    BackendError,
    BudgetExceeded,
    ChatResponse,
    Gateway,
    MalformedScript,
    RemoteBackend,
    Script,
    ScriptEntry,
    ScriptExhausted,
    ScriptedBackend,
    TransportError,
    Usage,
    load_script,
    make_request,
)
from prodresearch.model import Message, Role, ToolCallRecord

SYS = Message(Role.SYSTEM, "sys")


def req(tag="research_agent", text="hi"):
    return make_request(tag, [SYS, Message(Role.USER, text)])


def test_request_rejects_supervisor_role_and_missing_system():
    with pytest.raises(ValueError):
        make_request("judge", [Message(Role.USER, "x")])
    with pytest.raises(ValueError):
        make_request("judge", [SYS, Message(Role.SUPERVISOR, "x")])
    with pytest.raises(ValueError):
        make_request("nobody", [SYS])


def test_default_temperatures():
    assert req("research_agent").params.temperature == 0.7
    assert req("judge").params.temperature == 0.0


def test_digest_is_stable_and_content_sensitive():
    assert req(text="a").digest() == req(text="a").digest()
    assert req(text="a").digest() != req(text="b").digest()


def test_scripted_per_agent_sequence_and_exhaustion():
    script = Script([ScriptEntry("r0", "research_agent", 0), ScriptEntry("r1", "research_agent", 1),
                     ScriptEntry("j0", "judge", 0)])
    gw = Gateway(ScriptedBackend(script))
    assert gw.complete(req("research_agent")).text == "r0"
    assert gw.complete(req("judge")).text == "j0"
    assert gw.complete(req("research_agent")).text == "r1"
    with pytest.raises(ScriptExhausted):
        gw.complete(req("research_agent"))


def test_scripted_digest_match_wins():
    r = req(text="special")
    script = Script([ScriptEntry("by-seq", "research_agent", 0), ScriptEntry("by-digest", prompt_digest=r.digest())])
    assert Gateway(ScriptedBackend(script)).complete(r).text == "by-digest"


def test_synthetic_usage_is_chars_over_four():
    gw = Gateway(ScriptedBackend(Script([ScriptEntry("x" * 40, "judge", 0)])))
    resp = gw.complete(make_request("judge", [Message(Role.SYSTEM, "a" * 17), Message(Role.USER, "b" * 3)]))
    assert resp.usage == Usage(5, 10)
    assert gw.usage() == {"prompt_tokens": 5, "completion_tokens": 10}


def test_load_script_errors(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text('{"agent_tag": "judge", "sequence_index": 0, "response_text": "a"}\nnot json\n')
    with pytest.raises(MalformedScript) as exc:
        load_script(p)
    assert exc.value.line == 2
    p.write_text('{"agent_tag": "judge", "sequence_index": 0, "response_text": "a"}\n'
                 '{"agent_tag": "judge", "sequence_index": 0, "response_text": "b"}\n')
    with pytest.raises(MalformedScript, match="duplicate"):
        load_script(p)
    p.write_text('{"agent_tag": "nobody", "sequence_index": 0, "response_text": "a"}\n')
    with pytest.raises(MalformedScript, match="agent_tag"):
        load_script(p)


class Flaky:
    backend_id = "flaky"

    def __init__(self, failures):
        self.failures = failures
        self.calls = 0

    def send(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransportError("boom")
        return ChatResponse("ok  \n", Usage(1, 1), self.backend_id)


def test_retry_with_backoff():
    sleeps = []
    gw = Gateway(Flaky(2), retry_max=3, sleep=sleeps.append)
    resp = gw.complete(req())
    assert resp.text == "ok" and resp.attempts == 3
    assert sleeps == [0.5, 1.0]


def test_retry_gives_up_after_retry_max_plus_one():
    backend = Flaky(10)
    with pytest.raises(TransportError):
        Gateway(backend, retry_max=3, sleep=lambda s: None).complete(req())
    assert backend.calls == 4


def test_budget():
    gw = Gateway(Flaky(0), token_budget=3)
    gw.complete(req())
    with pytest.raises(BudgetExceeded):
        gw.complete(req())  # crosses 3
    with pytest.raises(BudgetExceeded):
        gw.complete(req())  # already spent


def remote(handler, **kw):
    return RemoteBackend("http://llm.test/v1/chat/completions", "m", api_key="k",
                         client=httpx.Client(transport=httpx.MockTransport(handler)), **kw)


def ok_body(text="hello", finish="stop"):
    return {"choices": [{"message": {"content": text}, "finish_reason": finish}],
            "usage": {"prompt_tokens": 3, "completion_tokens": 2}}


def test_remote_payload_and_parse():
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json=ok_body(finish="length"))

    tc = ToolCallRecord("c1", "product_search", {"query": "x"})
    r = make_request("research_agent", [SYS, Message(Role.USER, "q"), Message(Role.ASSISTANT, "a", (tc,)),
                                        Message(Role.TOOL, "result", tool_call_id="c1")], seed=5)
    resp = remote(handler).send(r)
    assert resp.text == "hello" and resp.truncated and resp.usage == Usage(3, 2)
    assert seen["auth"] == "Bearer k"
    assert seen["body"]["seed"] == 5 and seen["body"]["model"] == "m"
    last = seen["body"]["messages"][-1]
    assert last["role"] == "user" and "<tool_response>" in last["content"] and "result" in last["content"]


@pytest.mark.parametrize("status,err", [(429, TransportError), (503, TransportError), (400, BackendError)])
def test_remote_status_mapping(status, err):
    with pytest.raises(err):
        remote(lambda request: httpx.Response(status, text="no")).send(req())


def test_remote_bad_body_is_backend_error():
    with pytest.raises(BackendError):
        remote(lambda request: httpx.Response(200, json={"nope": 1})).send(req())


def test_remote_fault_injection_through_gateway():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] == 1:
            raise httpx.ConnectError("refused")
        if calls["n"] == 2:
            return httpx.Response(502, text="bad gateway")
        return httpx.Response(200, json=ok_body())

    resp = Gateway(remote(handler), sleep=lambda s: None).complete(req())
    assert resp.text == "hello" and resp.attempts == 3
