import json

import pytest
import requests

from demoforge.gateway import (
    Attachment,
    AuditLog,
    GatewayConfig,
    GatewayError,
    HttpGateway,
    MockGateway,
    PromptExchange,
    TransientFailure,
)


class TestMockGateway:
    def test_canned_response_zero_retries(self):
        gw = MockGateway(responses=["A"])
        assert gw.fresh_session().complete("hello") == "A"
        [entry] = gw.audit_log.entries()
        assert entry.retries == 0
        assert entry.response == "A"

    def test_fail_twice_then_answer(self):
        gw = MockGateway(responses=[TransientFailure(), TransientFailure(), "ok"])
        assert gw.fresh_session().complete("hello") == "ok"
        [entry] = gw.audit_log.entries()
        assert entry.retries == 2

    def test_persistent_failure_exhausts(self):
        gw = MockGateway(responses=[TransientFailure()] * 5)
        with pytest.raises(GatewayError) as err:
            gw.fresh_session().complete("hello")
        assert err.value.kind == "exhausted"

    def test_script_exhaustion(self):
        gw = MockGateway(responses=["only one"])
        gw.fresh_session().complete("a")
        with pytest.raises(GatewayError) as err:
            gw.fresh_session().complete("b")
        assert err.value.kind == "script"

    def test_sessions_are_stateless(self):
        gw = MockGateway(responder=lambda prompt: f"echo:{prompt}")
        s1, s2 = gw.fresh_session(), gw.fresh_session()
        assert s1.complete("same") == s2.complete("same") == "echo:same"

    def test_session_ids_distinct_and_logged(self):
        gw = MockGateway(responses=["x", "y"])
        s1, s2 = gw.fresh_session(), gw.fresh_session()
        s1.complete("p1")
        s2.complete("p2")
        ids = [e.session_id for e in gw.audit_log.entries()]
        assert len(set(ids)) == 2
        assert ids[0] == s1.session_id and ids[1] == s2.session_id

    def test_deterministic_given_script(self):
        outs = []
        for _ in range(2):
            gw = MockGateway(responses=["r1", "r2"])
            s = gw.fresh_session()
            outs.append((s.complete("a"), s.complete("b")))
        assert outs[0] == outs[1]

    def test_empty_prompt_rejected(self):
        gw = MockGateway(responses=["x"])
        with pytest.raises(ValueError):
            gw.fresh_session().complete("")

    def test_requires_exactly_one_source(self):
        with pytest.raises(ValueError):
            MockGateway()
        with pytest.raises(ValueError):
            MockGateway(responses=["a"], responder=lambda p: p)


def test_audit_log_file_round_trip(tmp_path):
    path = tmp_path / "audit.jsonl"
    gw = MockGateway(responses=["first", "second"], audit_log=AuditLog(path))
    s = gw.fresh_session()
    s.complete("p1", attachments=[Attachment(b"\x89PNG", "image/png")])
    gw.fresh_session().complete("p2")
    back = AuditLog.read(path)
    assert [e.to_json() for e in back] == [e.to_json() for e in gw.audit_log.entries()]
    assert back[0].attachments == [{"media_type": "image/png", "bytes": 4}]
    # file is valid JSONL
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 2
    for line in lines:
        json.loads(line)


def test_prompt_exchange_requires_request():
    with pytest.raises(ValueError):
        PromptExchange(session_id="s0", request="", response="r", model="m", latency=0.0, retries=0)


class _FakeResponse:
    def __init__(self, status_code, content="ok"):
        self.status_code = status_code
        self._content = content

    def json(self):
        return {"choices": [{"message": {"content": self._content}}]}


@pytest.fixture
def http_env(monkeypatch):
    monkeypatch.setenv("DEMOFORGE_API_KEY", "sk-test")
    calls = []

    def install(script):
        # script: list of status codes or exceptions, consumed per call
        def fake_post(url, json=None, headers=None, timeout=None):
            calls.append({"url": url, "json": json, "headers": headers})
            item = script.pop(0)
            if isinstance(item, Exception):
                raise item
            return _FakeResponse(item, content="answer")

        monkeypatch.setattr(requests, "post", fake_post)
        return calls

    return install


def _gw(**over):
    cfg = GatewayConfig(endpoint="https://example.invalid/v1/chat", model="m-test", backoff_base=0.0, **over)
    return HttpGateway(cfg)


class TestHttpGateway:
    def test_success(self, http_env):
        calls = http_env([200])
        gw = _gw()
        assert gw.fresh_session().complete("hello", temperature=0.2) == "answer"
        assert calls[0]["headers"]["Authorization"] == "Bearer sk-test"
        assert calls[0]["json"]["temperature"] == 0.2
        assert calls[0]["json"]["model"] == "m-test"
        assert gw.audit_log.entries()[0].retries == 0

    def test_transient_then_success(self, http_env):
        calls = http_env([500, 429, 200])
        gw = _gw()
        assert gw.fresh_session().complete("hello") == "answer"
        assert len(calls) == 3
        assert gw.audit_log.entries()[0].retries == 2

    def test_missing_credential_no_network(self, http_env, monkeypatch):
        calls = http_env([200])
        monkeypatch.delenv("DEMOFORGE_API_KEY")
        with pytest.raises(GatewayError) as err:
            _gw().fresh_session().complete("hello")
        assert err.value.kind == "auth"
        assert calls == []  # never touched the wire

    def test_auth_rejection_no_retry(self, http_env):
        calls = http_env([401, 200])
        with pytest.raises(GatewayError) as err:
            _gw().fresh_session().complete("hello")
        assert err.value.kind == "auth"
        assert len(calls) == 1

    def test_timeout_exhausts_distinguishably(self, http_env):
        http_env([requests.Timeout("slow")] * 4)
        with pytest.raises(GatewayError) as err:
            _gw().fresh_session().complete("hello")
        assert err.value.kind == "exhausted"
        assert "timeout" in str(err.value)

    def test_attachments_serialized(self, http_env):
        calls = http_env([200])
        _gw().fresh_session().complete("look", attachments=[Attachment(b"\x01\x02", "image/jpeg")])
        content = calls[0]["json"]["messages"][0]["content"]
        assert content[0] == {"type": "text", "text": "look"}
        assert content[1]["media_type"] == "image/jpeg"
        assert content[1]["data"] == "0102"

    def test_endpoint_required(self):
        with pytest.raises(ValueError):
            HttpGateway(GatewayConfig())


def test_config_from_dict_ignores_unknown_keys():
    cfg = GatewayConfig.from_dict({"endpoint": "https://x", "model": "m", "bogus": 1})
    assert cfg.endpoint == "https://x"
    assert cfg.model == "m"
    assert cfg.credential_env == "DEMOFORGE_API_KEY"
