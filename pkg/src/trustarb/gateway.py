"""Uniform access to classification agents: prompt rendering, structured-reply
parsing, and the capped re-prompt loop. Remote endpoints speak a
chat-completion-style JSON POST; scripted agents replay JSONL fixtures."""

from __future__ import annotations

import base64
import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import requests

from .core import (
    AgentPrediction,
    Clock,
    LabelSet,
    Stage,
    UnknownLabel,
    canonicalize_label,
)
from .vectorstore import ClassVote, RetrievalHit, ranked_votes_json


class ReplyFormatError(ValueError):
    """A reply could not be parsed into the required schema; re-prompt."""


class NoJsonFound(ReplyFormatError):
    pass


class MissingKey(ReplyFormatError):
    def __init__(self, name: str):
        super().__init__(f"reply object lacks key {name!r}")
        self.name = name


class ConfidenceOutOfRange(ReplyFormatError):
    pass


class EmptyVotes(ValueError):
    pass


class AgentUnreachable(RuntimeError):
    """Transport-level failure talking to an agent endpoint."""


class FormatExhausted(RuntimeError):
    """Every attempt failed to parse; the prediction is dropped from metrics."""

    def __init__(self, agent_id: str, image_id: str, attempts: int, last_error: Exception):
        super().__init__(
            f"agent {agent_id!r} never produced a parsable reply for {image_id!r} "
            f"({attempts} attempts; last error: {last_error})"
        )
        self.agent_id = agent_id
        self.image_id = image_id
        self.attempts = attempts
        self.last_error = last_error


class MissingFixtureEntry(KeyError):
    pass


@dataclass(frozen=True)
class AgentSpec:
    """How to reach one agent: a remote endpoint or a scripted fixture."""

    agent_id: str
    kind: str  # "remote" | "scripted"
    endpoint_url: str | None = None
    api_key_env: str | None = None
    model_name: str | None = None
    script_path: str | None = None
    timeout_ms: float = 60_000.0
    retry_cap: int = 3
    requests_per_minute: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("remote", "scripted"):
            raise ValueError(f"unknown agent kind: {self.kind!r}")
        if self.kind == "remote" and not self.endpoint_url:
            raise ValueError(f"remote agent {self.agent_id!r} needs endpoint_url")
        if self.kind == "scripted" and not self.script_path:
            raise ValueError(f"scripted agent {self.agent_id!r} needs script_path")
        if self.retry_cap < 0:
            raise ValueError("retry_cap must be >= 0")


@dataclass(frozen=True)
class AgentRequest:
    image_id: str
    prompt_text: str
    stage: Stage
    image_payload: bytes | None = None
    image_media_type: str = "image/jpeg"


@dataclass(frozen=True)
class ParsedReply:
    category: str
    justification: str
    confidence: float


@dataclass(frozen=True)
class RawAgentReply:
    text: str
    latency_ms: float = 0.0
    cost_usd: float = 0.0
    parsed: ParsedReply | None = None


REPLY_SCHEMA = '{"category": "<category>", "justification": "<short reasoning>", "confidence": <number>}'

FORMAT_CORRECTION = (
    "Your previous reply did not follow the required format. Respond again with "
    "a single JSON object and nothing else, exactly of the form "
    + REPLY_SCHEMA
    + " where category is one of the allowed categories and confidence is a "
    "number between 0 and 1."
)


def render_agent_prompt(labels: LabelSet) -> str:
    """Classification prompt: every label verbatim plus the reply schema."""
    label_lines = "\n".join(f"- {lab}" for lab in labels)
    return (
        "You are an image classification agent. Examine the attached image and "
        "assign it to exactly one of the following categories:\n"
        f"{label_lines}\n\n"
        "Reply with a single JSON object and nothing else, using exactly these "
        "keys: category, justification, confidence. For example:\n"
        f"{REPLY_SCHEMA}\n"
        'The "confidence" value must be a number in the range [0, 1]. The '
        '"category" value must be one of the categories listed above, spelled '
        'exactly as listed. Keep the "justification" to one or two sentences.'
    )


def render_reeval_prompt(
    prior: AgentPrediction,
    votes: Sequence[ClassVote],
    exemplars: Sequence[RetrievalHit],
    labels: LabelSet,
) -> str:
    """Re-evaluation prompt: prior answer plus retrieval context, same schema."""
    if not votes:
        raise EmptyVotes("re-evaluation needs at least one class vote")
    prior_json = json.dumps(
        {
            "category": prior.category,
            "justification": prior.justification,
            "confidence": prior.confidence,
        },
        ensure_ascii=False,
    )
    exemplar_lines = "\n".join(
        f"- {hit.label} (similarity {hit.similarity:.4f}, reference {hit.record_id})"
        for hit in exemplars
    )
    label_lines = ", ".join(labels)
    return (
        f"You previously classified image {prior.image_id} as follows:\n"
        f"{prior_json}\n\n"
        "A retrieval system compared this image against labeled reference "
        "images. Similarity-weighted class votes, ranked:\n"
        f"{ranked_votes_json(votes)}\n\n"
        "Most similar reference images:\n"
        f"{exemplar_lines}\n\n"
        "Considering this additional visual evidence, either revise or "
        "reaffirm your prediction. Reply with a single JSON object and "
        "nothing else, using exactly these keys: category, justification, "
        f"confidence (allowed categories: {label_lines}). "
        'The "confidence" value must be a number in the range [0, 1].'
    )


_DECODER = json.JSONDecoder()


def _first_json_object(text: str) -> dict:
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = _DECODER.raw_decode(text, start)
        except json.JSONDecodeError:
            start = text.find("{", start + 1)
            continue
        if isinstance(obj, dict):
            return obj
        start = text.find("{", start + 1)
    raise NoJsonFound("no JSON object in reply")


def parse_agent_reply(text: str, labels: LabelSet, *, text_key: str = "justification") -> ParsedReply:
    """Extract and validate the first JSON object in a reply.

    All raised errors map to one re-prompt attempt in the retry loop.
    """
    if not text:
        raise NoJsonFound("empty reply")
    obj = _first_json_object(text)
    if "category" not in obj:
        raise MissingKey("category")
    category = canonicalize_label(str(obj["category"]), labels)
    if "confidence" not in obj:
        raise MissingKey("confidence")
    confidence = obj["confidence"]
    if isinstance(confidence, bool) or not isinstance(confidence, (int, float)):
        raise ConfidenceOutOfRange(f"confidence is not a number: {confidence!r}")
    if not 0.0 <= float(confidence) <= 1.0:
        raise ConfidenceOutOfRange(f"confidence out of [0,1]: {confidence}")
    if text_key not in obj:
        raise MissingKey(text_key)
    justification = obj[text_key]
    if not isinstance(justification, str):
        raise ReplyFormatError(f"{text_key} must be a string")
    return ParsedReply(category=category, justification=justification, confidence=float(confidence))


class ScriptedAgent:
    """Fixture-driven transport: replies keyed by (image_id, stage).

    Fixture lines are JSON objects {"image_id", "stage", "reply" | "replies",
    "latency_ms"?, "cost_usd"?}; a replies list is consumed one entry per
    attempt (the last entry repeats). Zero cost and latency unless scripted.
    """

    def __init__(self, script_path: str, record_requests: bool = False):
        self._entries: dict[tuple[str, str], dict] = {}
        self._cursor: dict[tuple[str, str], int] = {}
        self.requests: list[AgentRequest] = []
        self._record = record_requests
        with open(script_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                self._entries[(entry["image_id"], entry["stage"])] = entry

    def reply(self, request: AgentRequest, conversation: list[dict], clock: Clock) -> RawAgentReply:
        if self._record:
            self.requests.append(request)
        key = (request.image_id, request.stage.value)
        entry = self._entries.get(key)
        if entry is None:
            raise MissingFixtureEntry(f"no fixture entry for {key}")
        replies = entry.get("replies")
        if replies is None:
            replies = [entry["reply"]]
        cursor = self._cursor.get(key, 0)
        text = replies[min(cursor, len(replies) - 1)]
        self._cursor[key] = cursor + 1
        latency_ms = float(entry.get("latency_ms", 0.0))
        clock.advance(latency_ms / 1000.0)
        return RawAgentReply(text=text, latency_ms=latency_ms, cost_usd=0.0)


class _TokenBucket:
    """Minimal requests/minute limiter for remote endpoints."""

    def __init__(self, per_minute: float):
        self.capacity = per_minute
        self.tokens = per_minute
        self.updated = time.monotonic()

    def acquire(self) -> None:
        while True:
            now = time.monotonic()
            self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.capacity / 60.0)
            self.updated = now
            if self.tokens >= 1.0:
                self.tokens -= 1.0
                return
            time.sleep((1.0 - self.tokens) * 60.0 / self.capacity)


class RemoteAgent:
    """Chat-completion-style JSON POST transport with bearer auth."""

    def __init__(self, spec: AgentSpec, session: requests.Session | None = None):
        self.spec = spec
        self.session = session or requests.Session()
        self._bucket = _TokenBucket(spec.requests_per_minute) if spec.requests_per_minute else None

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.spec.api_key_env:
            key = os.environ.get(self.spec.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def reply(self, request: AgentRequest, conversation: list[dict], clock: Clock) -> RawAgentReply:
        if self._bucket:
            self._bucket.acquire()
        body = {"model": self.spec.model_name, "messages": conversation}
        start = clock.now()
        try:
            resp = self.session.post(
                self.spec.endpoint_url,
                json=body,
                headers=self._headers(),
                timeout=self.spec.timeout_ms / 1000.0,
            )
            resp.raise_for_status()
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"]
        except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
            raise AgentUnreachable(f"agent {self.spec.agent_id!r}: {exc}") from exc
        latency_ms = (clock.now() - start) * 1000.0
        return RawAgentReply(text=text, latency_ms=latency_ms, cost_usd=0.0)


def make_transport(spec: AgentSpec):
    if spec.kind == "scripted":
        return ScriptedAgent(spec.script_path)
    return RemoteAgent(spec)


def _initial_user_turn(request: AgentRequest) -> dict:
    content: list[dict] = [{"type": "text", "text": request.prompt_text}]
    if request.image_payload is not None:
        payload = base64.b64encode(request.image_payload).decode("ascii")
        content.append(
            {
                "type": "image_url",
                "image_url": {"url": f"data:{request.image_media_type};base64,{payload}"},
            }
        )
    return {"role": "user", "content": content}


def invoke_with_retries(
    spec: AgentSpec,
    request: AgentRequest,
    parser: Callable[[str], ParsedReply],
    clock: Clock,
    transport=None,
) -> AgentPrediction:
    """Issue a request, re-prompting on format errors up to retry_cap extras.

    The recorded latency is wall clock across every attempt, read from the
    injected clock; attempts counts total tries.
    """
    if transport is None:
        transport = make_transport(spec)
    conversation = [_initial_user_turn(request)]
    start = clock.now()
    total_cost = 0.0
    last_error: Exception | None = None
    attempts = 0
    for attempt in range(spec.retry_cap + 1):
        attempts = attempt + 1
        reply = transport.reply(request, conversation, clock)
        total_cost += reply.cost_usd
        try:
            parsed = parser(reply.text)
        except (ReplyFormatError, UnknownLabel) as exc:
            last_error = exc
            conversation.append({"role": "assistant", "content": reply.text})
            conversation.append({"role": "user", "content": FORMAT_CORRECTION})
            continue
        return AgentPrediction(
            agent_id=spec.agent_id,
            image_id=request.image_id,
            stage=request.stage,
            category=parsed.category,
            confidence=parsed.confidence,
            justification=parsed.justification,
            latency_ms=(clock.now() - start) * 1000.0,
            cost_usd=total_cost,
            attempts=attempts,
        )
    raise FormatExhausted(spec.agent_id, request.image_id, attempts, last_error)
