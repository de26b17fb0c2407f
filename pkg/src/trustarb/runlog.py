"""Append-only, replayable run log: a JSONL stream of tagged records."""

from __future__ import annotations

import json
import os
from typing import Iterator

from .core import AgentPrediction, FinalDecision, Policy, Stage, prediction_to_record

RUNLOG_NAME = "run.jsonl"
PREDICTIONS_NAME = "predictions.jsonl"

#: record tags appearing in the run log
TYPE_PREDICTION = "prediction"
TYPE_TRACE = "trace"
TYPE_DECISION = "decision"
TYPE_UNDECIDED = "undecided"
TYPE_AGENT_ERROR = "agent_error"


class RunLogWriter:
    """Single writer appending tagged records; also mirrors predictions into
    the untagged prediction-log file consumed by trust profiling."""

    def __init__(self, run_dir: str):
        os.makedirs(run_dir, exist_ok=True)
        self.run_dir = run_dir
        self._log = open(os.path.join(run_dir, RUNLOG_NAME), "a", encoding="utf-8", newline="\n")
        self._preds = open(
            os.path.join(run_dir, PREDICTIONS_NAME), "a", encoding="utf-8", newline="\n"
        )

    def close(self) -> None:
        self._log.close()
        self._preds.close()

    def __enter__(self) -> "RunLogWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _write(self, record: dict) -> None:
        self._log.write(json.dumps(record, ensure_ascii=False) + "\n")
        self._log.flush()

    def log_prediction(self, pred: AgentPrediction, ts: float) -> None:
        record = prediction_to_record(pred, ts)
        self._write({"type": TYPE_PREDICTION, **record})
        self._preds.write(json.dumps(record, ensure_ascii=False) + "\n")
        self._preds.flush()

    def log_trace(self, trace_record: dict, ts: float) -> None:
        self._write({"type": TYPE_TRACE, **trace_record, "ts": ts})

    def log_decision(self, decision: FinalDecision, ts: float) -> None:
        self._write(
            {
                "type": TYPE_DECISION,
                "image_id": decision.image_id,
                "category": decision.category,
                "confidence": decision.confidence,
                "rationale": decision.rationale,
                "policy": decision.policy.value,
                "reeval_triggered": decision.reeval_triggered,
                "contributing": [
                    {"agent_id": aid, "stage": stage.value} for aid, stage in decision.contributing
                ],
                "ts": ts,
            }
        )

    def log_undecided(self, image_id: str, reason: str, ts: float) -> None:
        self._write({"type": TYPE_UNDECIDED, "image_id": image_id, "reason": reason, "ts": ts})

    def log_agent_error(self, agent_id: str, image_id: str, stage: Stage, error: str, ts: float) -> None:
        self._write(
            {
                "type": TYPE_AGENT_ERROR,
                "agent_id": agent_id,
                "image_id": image_id,
                "stage": stage.value,
                "error": error,
                "ts": ts,
            }
        )


def iter_records(run_dir: str) -> Iterator[dict]:
    path = os.path.join(run_dir, RUNLOG_NAME)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def runlog_exists(run_dir: str) -> bool:
    return os.path.exists(os.path.join(run_dir, RUNLOG_NAME))


def settled_image_ids(run_dir: str) -> set[str]:
    """Images already carrying a decision (or an undecided mark) in the log."""
    if not runlog_exists(run_dir):
        return set()
    settled = set()
    for rec in iter_records(run_dir):
        if rec["type"] in (TYPE_DECISION, TYPE_UNDECIDED):
            settled.add(rec["image_id"])
    return settled


def decision_from_record(rec: dict) -> FinalDecision:
    return FinalDecision(
        image_id=rec["image_id"],
        category=rec["category"],
        confidence=float(rec["confidence"]),
        rationale=rec["rationale"],
        policy=Policy(rec["policy"]),
        reeval_triggered=bool(rec["reeval_triggered"]),
        contributing=tuple(
            (c["agent_id"], Stage(c["stage"])) for c in rec.get("contributing", ())
        ),
    )
