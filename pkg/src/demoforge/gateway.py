"""Uniform client for text-completion services, plus scripted doubles.

All LLM traffic in the package flows through a Gateway. The mock variant is
bit-deterministic given its script, which is what the test suite runs on;
the HTTP variant speaks the common chat-completion JSON shape and is config
driven (endpoint, model, credential env var).

Sessions are deliberately heavyweight in the API: the summarization pipeline
requires that each query hit "a fresh instance" with no shared conversational
state, so callers must mint a session per logical query.
"""
from __future__ import annotations

import itertools
import json
import os
import threading
import time
from dataclasses import dataclass, field

import requests

DEFAULT_ANNOTATION_TEMPERATURE = 0.7  # stochastic: response variety feeds arm diversity
DEFAULT_RETARGETING_TEMPERATURE = 0.2  # stable: pose arithmetic, not prose


class GatewayError(RuntimeError):
    """Completion failed. ``kind`` is one of 'auth', 'timeout', 'transport',
    'exhausted', 'script'."""

    def __init__(self, message: str, kind: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class Attachment:
    """Opaque image bytes plus a media type tag."""

    data: bytes
    media_type: str = "image/png"


@dataclass
class PromptExchange:
    session_id: str
    request: str
    response: str
    model: str
    latency: float
    retries: int
    attachments: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.request:
            raise ValueError("exchange request must be non-empty")

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "request": self.request,
            "response": self.response,
            "model": self.model,
            "latency": self.latency,
            "retries": self.retries,
            "attachments": self.attachments,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PromptExchange":
        return cls(**doc)


class AuditLog:
    """Append-only JSONL of every prompt/response pair; safe across threads."""

    def __init__(self, path=None):
        self.path = path
        self._lock = threading.Lock()
        self._entries: list[PromptExchange] = []

    def append(self, exchange: PromptExchange) -> None:
        with self._lock:
            self._entries.append(exchange)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(exchange.to_json()) + "\n")

    def entries(self) -> list[PromptExchange]:
        with self._lock:
            return list(self._entries)

    @staticmethod
    def read(path) -> list[PromptExchange]:
        out = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    out.append(PromptExchange.from_json(json.loads(line)))
        return out


class Session:
    """One isolated conversation. Completions here share no state with any
    other session; the gateway only supplies transport and logging."""

    def __init__(self, gateway: "Gateway", session_id: str):
        self._gateway = gateway
        self.session_id = session_id

    def complete(self, prompt: str, attachments: list[Attachment] | None = None, **params) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        return self._gateway._complete(self.session_id, prompt, attachments or [], params)


class Gateway:
    """Base class: session bookkeeping and audit logging."""

    def __init__(self, audit_log: AuditLog | None = None):
        self.audit_log = audit_log if audit_log is not None else AuditLog()
        self._session_counter = itertools.count()

    def fresh_session(self) -> Session:
        return Session(self, f"s{next(self._session_counter):06d}")

    def _complete(self, session_id: str, prompt: str, attachments: list[Attachment], params: dict) -> str:
        start = time.monotonic()
        text, retries = self._transport(prompt, attachments, params)
        self.audit_log.append(
            PromptExchange(
                session_id=session_id,
                request=prompt,
                response=text,
                model=str(params.get("model", self._model_tag())),
                latency=time.monotonic() - start,
                retries=retries,
                attachments=[{"media_type": a.media_type, "bytes": len(a.data)} for a in attachments],
            )
        )
        return text

    def _model_tag(self) -> str:
        return "unknown"

    def _transport(self, prompt: str, attachments: list[Attachment], params: dict) -> tuple[str, int]:
        raise NotImplementedError


class TransientFailure:
    """Place one of these in a mock script to simulate a flaky transport."""


class MockGateway(Gateway):
    """Deterministic scripted double.

    Accepts either a fixed response list (consumed in order; TransientFailure
    entries raise once, costing a retry) or a responder callable mapping the
    prompt text to a response.
    """

    def __init__(self, responses=None, responder=None, audit_log: AuditLog | None = None):
        super().__init__(audit_log)
        if (responses is None) == (responder is None):
            raise ValueError("provide exactly one of responses or responder")
        self._responses = list(responses) if responses is not None else None
        self._responder = responder
        self._lock = threading.Lock()

    def _model_tag(self) -> str:
        return "mock"

    def _transport(self, prompt: str, attachments, params) -> tuple[str, int]:
        retries = 0
        while True:
            with self._lock:
                if self._responder is not None:
                    return str(self._responder(prompt)), retries
                if not self._responses:
                    raise GatewayError("mock script exhausted", kind="script")
                item = self._responses.pop(0)
            if isinstance(item, TransientFailure) or item is TransientFailure:
                if retries >= 3:
                    raise GatewayError("mock transport failed 3 retries", kind="exhausted")
                retries += 1
                continue
            return str(item), retries


@dataclass
class GatewayConfig:
    endpoint: str = ""
    model: str = ""
    credential_env: str = "DEMOFORGE_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 1.0  # seconds; doubles per retry, 0 disables sleeping

    @classmethod
    def from_dict(cls, doc: dict) -> "GatewayConfig":
        known = {k: v for k, v in doc.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class HttpGateway(Gateway):
    """Chat-completion-over-HTTP client. Transient transport errors are
    retried with exponential backoff; auth problems fail immediately."""

    def __init__(self, config: GatewayConfig, audit_log: AuditLog | None = None):
        super().__init__(audit_log)
        if not config.endpoint:
            raise ValueError("endpoint must be configured for live mode")
        self.config = config

    def _model_tag(self) -> str:
        return self.config.model

    def _credential(self) -> str:
        key = os.environ.get(self.config.credential_env, "")
        if not key:
            raise GatewayError(
                f"no credential in ${self.config.credential_env}", kind="auth"
            )
        return key

    def _transport(self, prompt: str, attachments, params) -> tuple[str, int]:
        key = self._credential()  # before any network traffic
        content: list[dict] | str
        if attachments:
            content = [{"type": "text", "text": prompt}] + [
                {"type": "image", "media_type": a.media_type, "data": a.data.hex()} for a in attachments
            ]
        else:
            content = prompt
        body = {
            "model": params.get("model", self.config.model),
            "messages": [{"role": "user", "content": content}],
            "temperature": params.get("temperature", DEFAULT_ANNOTATION_TEMPERATURE),
            "max_tokens": params.get("max_tokens", 4096),
        }
        last_err: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt and self.config.backoff_base > 0:
                time.sleep(self.config.backoff_base * 2 ** (attempt - 1))
            try:
                resp = requests.post(
                    self.config.endpoint,
                    json=body,
                    headers={"Authorization": f"Bearer {key}"},
                    timeout=params.get("timeout", self.config.timeout),
                )
            except requests.Timeout as err:
                last_err = GatewayError(f"timeout: {err}", kind="timeout")
                continue
            except requests.RequestException as err:
                last_err = GatewayError(f"transport: {err}", kind="transport")
                continue
            if resp.status_code in (401, 403):
                raise GatewayError(f"auth rejected ({resp.status_code})", kind="auth")
            if resp.status_code >= 500 or resp.status_code == 429:
                last_err = GatewayError(f"server {resp.status_code}", kind="transport")
                continue
            if resp.status_code != 200:
                raise GatewayError(f"unexpected status {resp.status_code}", kind="transport")
            doc = resp.json()
            return str(doc["choices"][0]["message"]["content"]), attempt
        raise GatewayError(f"retries exhausted: {last_err}", kind="exhausted")
