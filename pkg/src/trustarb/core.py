"""Shared domain vocabulary: labels, samples, predictions, decisions, clocks.

Every type here is an immutable value after construction and safe to share
between concurrent tasks.
"""

from __future__ import annotations

import json
import math
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Mapping

DEFAULT_LABELS = ("healthy", "black-rot", "rust", "scab")

#: Exact field order of one prediction-log record (JSONL, one object per line).
PREDICTION_RECORD_FIELDS = (
    "image_id",
    "agent_id",
    "stage",
    "category",
    "confidence",
    "justification",
    "latency_ms",
    "cost_usd",
    "attempts",
    "ts",
)


class UnknownLabel(ValueError):
    """A raw label string could not be mapped into the label set."""

    def __init__(self, raw: str):
        super().__init__(f"unknown label: {raw!r}")
        self.raw = raw


class Stage(str, Enum):
    INITIAL = "initial"
    REEVAL = "reeval"


class Policy(str, Enum):
    CONFIDENCE_AWARE = "confidence_aware"
    TRUST_AWARE_RAG = "trust_aware_rag"
    RULE_FALLBACK = "rule_fallback"


_CANON_RE = re.compile(r"[\s_-]+")


def canonical_form(raw: str) -> str:
    """Lowercase, trim, and collapse whitespace/underscore/hyphen runs to '-'."""
    return _CANON_RE.sub("-", raw.strip().lower()).strip("-")


@dataclass(frozen=True)
class LabelSet:
    """Ordered set of canonical class labels.

    The order is fixed at construction time and governs confusion-matrix axes
    and every deterministic tie-break downstream.
    """

    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.labels) < 2:
            raise ValueError("a label set needs at least 2 labels")
        seen = set()
        for lab in self.labels:
            if not lab or canonical_form(lab) != lab:
                raise ValueError(f"label not in canonical form: {lab!r}")
            if lab in seen:
                raise ValueError(f"duplicate label: {lab!r}")
            seen.add(lab)

    def __iter__(self) -> Iterator[str]:
        return iter(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: object) -> bool:
        return label in self.labels

    def rank(self, label: str) -> int:
        """Position of a canonical label; the tie-break key."""
        try:
            return self.labels.index(label)
        except ValueError:
            raise UnknownLabel(str(label)) from None


def default_label_set() -> LabelSet:
    return LabelSet(DEFAULT_LABELS)


def canonicalize_label(raw: str, labels: LabelSet) -> str:
    """Map free-form text onto the unique matching canonical label.

    Idempotent: a successful result canonicalizes to itself.
    """
    if raw is None or not str(raw).strip():
        raise UnknownLabel(str(raw))
    canon = canonical_form(str(raw))
    if canon in labels:
        return canon
    raise UnknownLabel(str(raw))


@dataclass(frozen=True)
class Sample:
    """One input image at the identity level; pixels live elsewhere."""

    image_id: str
    image_ref: str | bytes | None = None
    true_label: str | None = None


@dataclass(frozen=True)
class AgentPrediction:
    """One agent's reply for one image at one pipeline stage."""

    agent_id: str
    image_id: str
    stage: Stage
    category: str
    confidence: float
    justification: str
    latency_ms: float = 0.0
    cost_usd: float = 0.0
    attempts: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence out of [0,1]: {self.confidence}")
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be non-negative")
        if self.cost_usd < 0:
            raise ValueError("cost_usd must be non-negative")
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")


@dataclass(frozen=True)
class FinalDecision:
    """The orchestrator's final call for one image."""

    image_id: str
    category: str
    confidence: float
    rationale: str
    policy: Policy
    reeval_triggered: bool = False
    contributing: tuple[tuple[str, Stage], ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence out of [0,1]: {self.confidence}")
        if self.policy is Policy.CONFIDENCE_AWARE and self.reeval_triggered:
            raise ValueError("confidence_aware decisions cannot mark re-evaluation")


class Clock:
    """Injectable time source; now() is monotonically non-decreasing."""

    def now(self) -> float:
        raise NotImplementedError

    def advance(self, seconds: float) -> None:
        """Move simulated time forward; real clocks ignore this."""


class SystemClock(Clock):
    def now(self) -> float:
        return time.time()

    def advance(self, seconds: float) -> None:
        pass


class ManualClock(Clock):
    """Deterministic clock for replayable runs; time moves only via advance()."""

    def __init__(self, start: float = 0.0):
        self._t = float(start)

    def now(self) -> float:
        return self._t

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("clock cannot move backwards")
        self._t += float(seconds)


def prediction_to_record(pred: AgentPrediction, ts: float) -> dict:
    """Build the wire record for one prediction; key order is the file contract."""
    return {
        "image_id": pred.image_id,
        "agent_id": pred.agent_id,
        "stage": pred.stage.value,
        "category": pred.category,
        "confidence": pred.confidence,
        "justification": pred.justification,
        "latency_ms": pred.latency_ms,
        "cost_usd": pred.cost_usd,
        "attempts": pred.attempts,
        "ts": ts,
    }


def prediction_from_record(record: Mapping) -> tuple[AgentPrediction, float]:
    """Parse one prediction-log record back into (prediction, ts)."""
    pred = AgentPrediction(
        agent_id=record["agent_id"],
        image_id=record["image_id"],
        stage=Stage(record["stage"]),
        category=record["category"],
        confidence=float(record["confidence"]),
        justification=record["justification"],
        latency_ms=float(record["latency_ms"]),
        cost_usd=float(record["cost_usd"]),
        attempts=int(record["attempts"]),
    )
    return pred, float(record["ts"])


def write_jsonl(path, records) -> None:
    """Write records as UTF-8 JSONL with LF line endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def read_truth(path) -> dict[str, str]:
    """Load a ground-truth JSONL file ({"image_id","label"} per line)."""
    return {rec["image_id"]: rec["label"] for rec in read_jsonl(path)}


def write_truth(path, truth: Mapping[str, str]) -> None:
    write_jsonl(path, ({"image_id": i, "label": l} for i, l in truth.items()))


def round_report(value, places: int = 4):
    """Rounding used by emitted reports; in-memory values stay full precision."""
    if value is None:
        return None
    if isinstance(value, float) and math.isfinite(value):
        return round(value, places)
    return value
