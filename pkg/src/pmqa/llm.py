"""Structured-chat gateway: one capability, many prompt templates.

Every model-facing stage goes through ``LlmGateway.complete``, which
sends the prompt, accounts tokens into the session ledger, and
validates the reply envelope against the request's schema.  A reply
that fails validation triggers a bounded number of re-asks, each
appending a corrective user message restating the required envelope.

Two backends: an OpenAI-compatible chat-completions endpoint for live
runs, and a scripted backend that replays pre-authored turns in order
for deterministic, network-free sessions.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from typing import Optional

import requests

from .ledger import CostLedger
from .schemas import REGISTRY, REMINDERS, SchemaError, extract_envelope

logger = logging.getLogger(__name__)


class TransportError(Exception):
    """Network-level failure talking to the model backend; retryable."""


class ScriptMismatch(Exception):
    """A scripted session received a request its next turn does not match."""


@dataclass(frozen=True)
class ChatRequest:
    role_blocks: tuple
    schema_id: str
    temperature: float = 0.0
    max_output_tokens: Optional[int] = None

    def __post_init__(self):
        if not any(role == "user" for role, _ in self.role_blocks):
            raise ValueError("request needs at least one user block")
        if not all(role in ("system", "user") for role, _ in self.role_blocks):
            raise ValueError("roles must be system or user")
        if self.schema_id not in REGISTRY:
            raise ValueError(f"unregistered schema {self.schema_id!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        object.__setattr__(self, "role_blocks", tuple(self.role_blocks))

    def prompt_text(self) -> str:
        return "\n".join(text for _, text in self.role_blocks)


@dataclass
class ChatResponse:
    raw_text: str
    parsed: Optional[object]
    input_tokens: int
    output_tokens: int
    attempt: int
    estimated_usage: bool = False


def user_request(prompt: str, schema_id: str, temperature: float = 0.0,
                 max_output_tokens: Optional[int] = None) -> ChatRequest:
    return ChatRequest((("user", prompt),), schema_id, temperature, max_output_tokens)


def estimate_tokens(text: str) -> int:
    """Fallback when the backend reports no usage: ~4 characters/token."""
    return math.ceil(len(text) / 4)


# ----------------------------------------------------------------------
# Backends
# ----------------------------------------------------------------------


@dataclass
class ScriptedTurn:
    """One pre-authored model reply for the scripted backend.

    The turn matches a request when the schema ids agree and, if given,
    ``contains`` occurs in the rendered prompt text.
    """

    schema_id: str
    reply: str
    input_tokens: int = 0
    output_tokens: int = 0
    contains: Optional[str] = None


class ScriptedBackend:
    """Replays scripted turns in order; any mismatch is a hard failure."""

    def __init__(self, turns):
        self.turns = list(turns)
        self.cursor = 0

    @classmethod
    def from_jsonl(cls, path) -> "ScriptedBackend":
        turns = []
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ScriptMismatch(f"{path}:{line_no}: not a JSON record: {exc}") from exc
                turns.append(
                    ScriptedTurn(
                        schema_id=obj["schema_id"],
                        reply=obj["reply"],
                        input_tokens=int(obj.get("input_tokens", 0)),
                        output_tokens=int(obj.get("output_tokens", 0)),
                        contains=obj.get("contains"),
                    )
                )
        return cls(turns)

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.turns)

    def send(self, request: ChatRequest):
        if self.exhausted:
            raise ScriptMismatch(
                f"script exhausted after {len(self.turns)} turns; "
                f"got request for schema {request.schema_id!r}"
            )
        turn = self.turns[self.cursor]
        prompt = request.prompt_text()
        if turn.schema_id != request.schema_id:
            raise ScriptMismatch(
                f"turn {self.cursor}: scripted schema {turn.schema_id!r} "
                f"!= requested {request.schema_id!r}"
            )
        if turn.contains and turn.contains not in prompt:
            raise ScriptMismatch(
                f"turn {self.cursor}: prompt does not contain {turn.contains!r}"
            )
        self.cursor += 1
        return turn.reply, (turn.input_tokens, turn.output_tokens)


class OpenAIChatBackend:
    """Minimal client for an OpenAI-compatible chat-completions endpoint."""

    def __init__(self, base_url: str, model: str, api_key: str = "",
                 timeout: float = 60.0, session: Optional[requests.Session] = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()

    def send(self, request: ChatRequest):
        messages = [{"role": role, "content": text} for role, text in request.role_blocks]
        payload = {
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
        }
        if request.max_output_tokens:
            payload["max_tokens"] = request.max_output_tokens
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.session.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"backend returned HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise TransportError(f"backend returned HTTP {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion payload: {exc}") from exc
        usage = body.get("usage") or {}
        if "prompt_tokens" in usage and "completion_tokens" in usage:
            return text, (int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
        return text, None


# ----------------------------------------------------------------------
# Gateway
# ----------------------------------------------------------------------


class LlmGateway:
    """Completion with token accounting, transport retries, and schema re-asks."""

    def __init__(self, backend, schema_retries: int = 2, transport_retries: int = 3,
                 backoff_base: float = 0.5, sleeper=time.sleep):
        self.backend = backend
        self.schema_retries = schema_retries
        self.transport_retries = transport_retries
        self.backoff_base = backoff_base
        self.sleeper = sleeper

    def _send(self, request: ChatRequest):
        last = None
        for attempt in range(self.transport_retries):
            try:
                return self.backend.send(request)
            except TransportError as exc:
                last = exc
                if attempt + 1 < self.transport_retries:
                    delay = self.backoff_base * (2 ** attempt)
                    logger.warning("transport error (%s); retry in %.1fs", exc, delay)
                    self.sleeper(delay)
        raise last

    def complete(self, request: ChatRequest, ledger: Optional[CostLedger] = None,
                 stage: str = "answer") -> ChatResponse:
        """Send, account, validate; re-ask up to schema_retries times.

        Every physical call lands in the ledger, including failed
        attempts, so token totals reflect what was actually spent.
        """
        blocks = list(request.role_blocks)
        last_err: Optional[SchemaError] = None
        for attempt in range(self.schema_retries + 1):
            attempt_req = ChatRequest(
                tuple(blocks), request.schema_id, request.temperature, request.max_output_tokens
            )
            raw, usage = self._send(attempt_req)
            if usage is None:
                input_tokens = estimate_tokens(attempt_req.prompt_text())
                output_tokens = estimate_tokens(raw)
                estimated = True
            else:
                input_tokens, output_tokens = usage
                estimated = False
            if ledger is not None:
                ledger.record_llm(stage, input_tokens, output_tokens, estimated=estimated)
            try:
                parsed = extract_envelope(raw, request.schema_id)
            except SchemaError as exc:
                last_err = exc
                logger.info("schema failure on %s (attempt %d): %s", request.schema_id, attempt, exc)
                blocks.append(
                    (
                        "user",
                        f"Your previous reply was not a valid envelope ({exc}). "
                        + REMINDERS[request.schema_id],
                    )
                )
                continue
            return ChatResponse(raw, parsed, input_tokens, output_tokens, attempt, estimated)
        raise last_err
