"""Analysis surfaces: classification metrics, confusion matrices, calibration
curves, overconfidence points, latency statistics, disagreement and
re-evaluation audits, and the report bundle.

Everything here is a pure function of the logs: same logs, same report bytes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .core import (
    AgentPrediction,
    FinalDecision,
    LabelSet,
    Stage,
    UnknownLabel,
    prediction_from_record,
    round_report,
)
from .orchestrator import ReEvalTrace, trace_from_record
from .runlog import (
    TYPE_DECISION,
    TYPE_PREDICTION,
    TYPE_TRACE,
    TYPE_UNDECIDED,
    decision_from_record,
    iter_records,
    runlog_exists,
)
from .trust import EmptyLog, LengthMismatch, ScoredOutcome, bin_stats, build_trust_profile, trust_profile_csv_row, TRUST_CSV_HEADER


class AlignmentError(ValueError):
    """Logs that must share image ids do not."""


class NoErrors(ValueError):
    """An error-conditioned statistic was asked of an all-correct log."""


class MissingLog(FileNotFoundError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    labels: tuple[str, ...]
    counts: tuple[tuple[int, ...], ...]  # rows = true, columns = predicted

    @property
    def n(self) -> int:
        return sum(sum(row) for row in self.counts)

    def csv_lines(self) -> list[str]:
        lines = ["true_label," + ",".join(self.labels)]
        for label, row in zip(self.labels, self.counts):
            lines.append(label + "," + ",".join(str(c) for c in row))
        return lines


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    n: int
    accuracy: float
    per_class: dict[str, ClassScores]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    confusion: ConfusionMatrix
    warnings: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "accuracy": round_report(self.accuracy),
            "per_class": {
                lab: {
                    "precision": round_report(s.precision),
                    "recall": round_report(s.recall),
                    "f1": round_report(s.f1),
                    "support": s.support,
                }
                for lab, s in self.per_class.items()
            },
            "macro": {
                "precision": round_report(self.macro_precision),
                "recall": round_report(self.macro_recall),
                "f1": round_report(self.macro_f1),
            },
            "weighted": {
                "precision": round_report(self.weighted_precision),
                "recall": round_report(self.weighted_recall),
                "f1": round_report(self.weighted_f1),
            },
        }


@dataclass(frozen=True)
class CurveBin:
    lo: float
    hi: float
    count: int
    mean_conf: float | None
    accuracy: float | None


@dataclass(frozen=True)
class CalibrationCurve:
    bins: tuple[CurveBin, ...]

    def csv_lines(self) -> list[str]:
        lines = ["bin_lo,bin_hi,count,mean_conf,accuracy"]
        for b in self.bins:
            mc = "" if b.mean_conf is None else format(b.mean_conf, ".4f")
            acc = "" if b.accuracy is None else format(b.accuracy, ".4f")
            lines.append(f"{b.lo!r},{b.hi!r},{b.count},{mc},{acc}")
        return lines


def classification_metrics(
    predicted: Sequence[str], truth: Sequence[str], labels: LabelSet
) -> MetricsReport:
    """Standard per-class and aggregate classification metrics.

    Everything is a ratio of integer counts, so the computation runs in exact
    rational arithmetic and converts to float once at the end; balanced truth
    support therefore makes weighted and macro aggregates literally equal.
    Classes with zero predicted support get precision 0 with a warning rather
    than NaN.
    """
    if len(predicted) != len(truth):
        raise LengthMismatch(f"{len(predicted)} predictions vs {len(truth)} truths")
    if not predicted:
        raise EmptyLog("nothing to score")
    index = {lab: i for i, lab in enumerate(labels)}
    for lab in list(predicted) + list(truth):
        if lab not in index:
            raise UnknownLabel(lab)
    size = len(labels)
    grid = [[0] * size for _ in range(size)]
    for p, t in zip(predicted, truth):
        grid[index[t]][index[p]] += 1
    n = len(predicted)
    correct = sum(grid[i][i] for i in range(size))
    warnings: list[str] = []
    per_class: dict[str, ClassScores] = {}
    precisions: list[Fraction] = []
    recalls: list[Fraction] = []
    f1s: list[Fraction] = []
    supports: list[int] = []
    for i, lab in enumerate(labels):
        tp = grid[i][i]
        support = sum(grid[i])
        pred_support = sum(grid[r][i] for r in range(size))
        if pred_support:
            precision = Fraction(tp, pred_support)
        else:
            precision = Fraction(0)
            warnings.append(f"class {lab!r} never predicted; precision set to 0")
        if support:
            recall = Fraction(tp, support)
        else:
            recall = Fraction(0)
            warnings.append(f"class {lab!r} absent from truth; recall set to 0")
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else Fraction(0)
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
        supports.append(support)
        per_class[lab] = ClassScores(
            precision=float(precision), recall=float(recall), f1=float(f1), support=support
        )

    def macro(values: list[Fraction]) -> float:
        return float(sum(values) / size)

    def weighted(values: list[Fraction]) -> float:
        return float(sum(Fraction(s, n) * v for s, v in zip(supports, values)))

    return MetricsReport(
        n=n,
        accuracy=float(Fraction(correct, n)),
        per_class=per_class,
        macro_precision=macro(precisions),
        macro_recall=macro(recalls),
        macro_f1=macro(f1s),
        weighted_precision=weighted(precisions),
        weighted_recall=weighted(recalls),
        weighted_f1=weighted(f1s),
        confusion=ConfusionMatrix(
            labels=tuple(labels), counts=tuple(tuple(row) for row in grid)
        ),
        warnings=tuple(warnings),
    )


def calibration_curve(outcomes: Sequence[ScoredOutcome], bins: int = 10) -> CalibrationCurve:
    """Plot-ready reliability points under the same binning rule as ece()."""
    stats = bin_stats(outcomes, bins)
    return CalibrationCurve(
        bins=tuple(
            CurveBin(lo=s.lo, hi=s.hi, count=s.count, mean_conf=s.mean_conf, accuracy=s.accuracy)
            for s in stats
        )
    )


@dataclass(frozen=True)
class OverconfidencePoint:
    mean_conf_on_wrong: float
    macro_f1: float


def overconfidence_point(
    outcomes: Sequence[ScoredOutcome], metrics: MetricsReport
) -> OverconfidencePoint:
    wrong = [o.confidence for o in outcomes if not o.correct]
    if not wrong:
        raise NoErrors("no incorrect predictions in this log")
    return OverconfidencePoint(
        mean_conf_on_wrong=sum(wrong) / len(wrong), macro_f1=metrics.macro_f1
    )


def _latest_by_agent(predictions: Sequence[AgentPrediction]) -> dict[str, dict[str, AgentPrediction]]:
    """agent_id -> image_id -> stage-latest prediction."""
    out: dict[str, dict[str, AgentPrediction]] = {}
    for pred in predictions:
        slot = out.setdefault(pred.agent_id, {})
        prev = slot.get(pred.image_id)
        if prev is None or (prev.stage is Stage.INITIAL and pred.stage is Stage.REEVAL):
            slot[pred.image_id] = pred
    return out


@dataclass(frozen=True)
class AgentDisagreement:
    n: int
    disagreements: int
    disagreement_rate: float
    orchestrator_correct: int
    orchestrator_correct_rate: float | None

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "disagreements": self.disagreements,
            "disagreement_rate": round_report(self.disagreement_rate),
            "orchestrator_correct": self.orchestrator_correct,
            "orchestrator_correct_rate": round_report(self.orchestrator_correct_rate),
        }


def disagreement_analysis(
    agent_log: Sequence[AgentPrediction],
    decisions: Sequence[FinalDecision],
    truth: Mapping[str, str],
) -> dict[str, AgentDisagreement]:
    """Per agent: how often the final decision differs, and who was right.

    Rates are over the full evaluated set; the orchestrator-correct rate is
    among the disagreements only.
    """
    latest = _latest_by_agent(agent_log)
    by_image = {d.image_id: d for d in decisions}
    missing = [i for i in by_image if i not in truth]
    if missing:
        raise AlignmentError(f"decisions without ground truth: {missing[:5]}")
    report: dict[str, AgentDisagreement] = {}
    for agent_id in sorted(latest):
        preds = latest[agent_id]
        n = 0
        disagreements = 0
        orch_correct = 0
        for image_id, decision in by_image.items():
            pred = preds.get(image_id)
            if pred is None:
                continue
            n += 1
            if decision.category != pred.category:
                disagreements += 1
                if decision.category == truth[image_id]:
                    orch_correct += 1
        if n == 0:
            raise AlignmentError(f"agent {agent_id!r} shares no images with the decisions")
        report[agent_id] = AgentDisagreement(
            n=n,
            disagreements=disagreements,
            disagreement_rate=disagreements / n,
            orchestrator_correct=orch_correct,
            orchestrator_correct_rate=orch_correct / disagreements if disagreements else None,
        )
    return report


@dataclass(frozen=True)
class AgentReevalBehavior:
    n: int
    reaffirmations: int
    reaffirmation_rate: float
    reaffirmations_correct: int
    overcorrections: int
    overcorrection_rate: float

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "reaffirmations": self.reaffirmations,
            "reaffirmation_rate": round_report(self.reaffirmation_rate),
            "reaffirmations_correct": self.reaffirmations_correct,
            "overcorrections": self.overcorrections,
            "overcorrection_rate": round_report(self.overcorrection_rate),
        }


def reeval_behavior_analysis(
    traces: Sequence[ReEvalTrace], truth: Mapping[str, str]
) -> dict[str, AgentReevalBehavior]:
    """Reaffirmation and overcorrection counts per agent across traces.

    A reaffirmation is a triggered re-evaluation whose revision kept the
    category; an overcorrection turned an initially correct answer wrong.
    Rates are over all traces.
    """
    total = len(traces)
    agents: dict[str, dict[str, int]] = {}
    for trace in traces:
        for agent_id, rnd in trace.rounds.items():
            stats = agents.setdefault(
                agent_id, {"reaffirm": 0, "reaffirm_correct": 0, "overcorrect": 0}
            )
            if not trace.triggered or rnd.revised is None:
                continue
            true_label = truth.get(trace.image_id)
            if not rnd.changed:
                stats["reaffirm"] += 1
                if true_label is not None and rnd.revised.category == true_label:
                    stats["reaffirm_correct"] += 1
            elif true_label is not None:
                if rnd.initial.category == true_label and rnd.revised.category != true_label:
                    stats["overcorrect"] += 1
    return {
        agent_id: AgentReevalBehavior(
            n=total,
            reaffirmations=s["reaffirm"],
            reaffirmation_rate=s["reaffirm"] / total if total else 0.0,
            reaffirmations_correct=s["reaffirm_correct"],
            overcorrections=s["overcorrect"],
            overcorrection_rate=s["overcorrect"] / total if total else 0.0,
        )
        for agent_id, s in sorted(agents.items())
    }


@dataclass(frozen=True)
class LatencySummary:
    n: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    hist_edges: tuple[float, ...]
    hist_counts: tuple[int, ...]

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "min": round_report(self.minimum),
            "q1": round_report(self.q1),
            "median": round_report(self.median),
            "q3": round_report(self.q3),
            "max": round_report(self.maximum),
            "hist_edges": [round_report(e) for e in self.hist_edges],
            "hist_counts": list(self.hist_counts),
        }


_HIST_BINS = 10


def latency_stats(predictions: Sequence[AgentPrediction]) -> dict[str, LatencySummary]:
    """Per-stage latency quartiles plus a fixed-width histogram over [0, max]."""
    if not predictions:
        raise EmptyLog("no predictions")
    by_stage: dict[str, list[float]] = {}
    for pred in predictions:
        by_stage.setdefault(pred.stage.value, []).append(pred.latency_ms)
    out: dict[str, LatencySummary] = {}
    for stage, values in sorted(by_stage.items()):
        arr = np.asarray(values, dtype=np.float64)
        q = np.quantile(arr, [0.0, 0.25, 0.5, 0.75, 1.0])
        top = float(arr.max())
        edges = np.linspace(0.0, top if top > 0 else 1.0, _HIST_BINS + 1)
        counts, _ = np.histogram(arr, bins=edges)
        out[stage] = LatencySummary(
            n=len(values),
            minimum=float(q[0]),
            q1=float(q[1]),
            median=float(q[2]),
            q3=float(q[3]),
            maximum=float(q[4]),
            hist_edges=tuple(float(e) for e in edges),
            hist_counts=tuple(int(c) for c in counts),
        )
    return out


# -- report bundle ----------------------------------------------------------


def load_run(run_dir: str):
    """Split a run log into predictions, traces, decisions, undecided ids."""
    if not runlog_exists(run_dir):
        raise MissingLog(f"no run log under {run_dir!r}")
    predictions: list[AgentPrediction] = []
    traces: list[ReEvalTrace] = []
    decisions: list[FinalDecision] = []
    undecided: list[str] = []
    for rec in iter_records(run_dir):
        kind = rec["type"]
        if kind == TYPE_PREDICTION:
            pred, _ = prediction_from_record(rec)
            predictions.append(pred)
        elif kind == TYPE_TRACE:
            traces.append(trace_from_record(rec))
        elif kind == TYPE_DECISION:
            decisions.append(decision_from_record(rec))
        elif kind == TYPE_UNDECIDED:
            undecided.append(rec["image_id"])
    return predictions, traces, decisions, undecided


def _write_text(path: str, lines: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _outcomes(pairs: Sequence[tuple[str, float]], truth: Mapping[str, str], images: Sequence[str]):
    return [
        ScoredOutcome(confidence=conf, correct=(category == truth[img]))
        for img, (category, conf) in zip(images, pairs)
    ]


def emit_report(
    run_dir: str,
    truth: Mapping[str, str],
    labels: LabelSet,
    out_dir: str | None = None,
    *,
    ece_bins: int = 10,
    ocr_threshold: float = 0.9,
) -> dict:
    """Materialize the full report bundle from a run directory.

    Writes metrics.json, confusion_<agent>.csv, calibration_<agent>.csv,
    trust_profiles.csv, disagreements.json, latency.csv. Pure function of the
    logs: regenerating produces identical bytes.
    """
    predictions, traces, decisions, undecided = load_run(run_dir)
    out_dir = out_dir or os.path.join(run_dir, "report")
    os.makedirs(out_dir, exist_ok=True)
    latest = _latest_by_agent(predictions)

    evaluated = [d.image_id for d in decisions if d.image_id in truth]
    metrics_obj: dict = {"n": len(evaluated), "undecided": len(undecided), "agents": {}, "orchestrator": None}
    overconf: dict = {}

    profiles = []
    for agent_id in sorted(latest):
        per_image = latest[agent_id]
        images = sorted(i for i in per_image if i in truth)
        preds = [per_image[i].category for i in images]
        true = [truth[i] for i in images]
        report = classification_metrics(preds, true, labels)
        metrics_obj["agents"][agent_id] = report.to_json_dict()
        outcomes = [
            ScoredOutcome(per_image[i].confidence, per_image[i].category == truth[i]) for i in images
        ]
        curve = calibration_curve(outcomes, ece_bins)
        _write_text(os.path.join(out_dir, f"confusion_{agent_id}.csv"), report.confusion.csv_lines())
        _write_text(os.path.join(out_dir, f"calibration_{agent_id}.csv"), curve.csv_lines())
        try:
            point = overconfidence_point(outcomes, report)
            overconf[agent_id] = {
                "mean_conf_on_wrong": round_report(point.mean_conf_on_wrong),
                "macro_f1": round_report(point.macro_f1),
            }
        except NoErrors:
            overconf[agent_id] = None
        initial_outcomes = [
            ScoredOutcome(p.confidence, p.category == truth[p.image_id])
            for p in predictions
            if p.agent_id == agent_id and p.stage is Stage.INITIAL and p.image_id in truth
        ]
        if initial_outcomes:
            profiles.append(
                build_trust_profile(
                    agent_id, initial_outcomes, ece_bins=ece_bins, ocr_threshold=ocr_threshold
                )
            )

    if evaluated:
        dec_by_image = {d.image_id: d for d in decisions}
        images = sorted(evaluated)
        preds = [dec_by_image[i].category for i in images]
        true = [truth[i] for i in images]
        report = classification_metrics(preds, true, labels)
        metrics_obj["orchestrator"] = report.to_json_dict()
        outcomes = [
            ScoredOutcome(dec_by_image[i].confidence, dec_by_image[i].category == truth[i])
            for i in images
        ]
        _write_text(os.path.join(out_dir, "confusion_orchestrator.csv"), report.confusion.csv_lines())
        _write_text(
            os.path.join(out_dir, "calibration_orchestrator.csv"),
            calibration_curve(outcomes, ece_bins).csv_lines(),
        )
        try:
            point = overconfidence_point(outcomes, report)
            overconf["orchestrator"] = {
                "mean_conf_on_wrong": round_report(point.mean_conf_on_wrong),
                "macro_f1": round_report(point.macro_f1),
            }
        except NoErrors:
            overconf["orchestrator"] = None

    metrics_obj["overconfidence"] = overconf
    if predictions:
        metrics_obj["latency"] = {
            stage: summary.to_json_dict() for stage, summary in latency_stats(predictions).items()
        }

    _write_text(
        os.path.join(out_dir, "trust_profiles.csv"),
        [TRUST_CSV_HEADER] + [trust_profile_csv_row(p) for p in profiles],
    )

    disagreements_obj: dict = {"disagreements": None, "reeval_behavior": None}
    if decisions and latest:
        disagreements_obj["disagreements"] = {
            aid: rep.to_json_dict()
            for aid, rep in disagreement_analysis(predictions, decisions, truth).items()
        }
    if traces:
        disagreements_obj["reeval_behavior"] = {
            aid: rep.to_json_dict()
            for aid, rep in reeval_behavior_analysis(traces, truth).items()
        }
    with open(os.path.join(out_dir, "disagreements.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(disagreements_obj, fh, indent=2, sort_keys=True)
        fh.write("\n")

    latency_lines = ["stage,n,min,q1,median,q3,max"]
    if predictions:
        for stage, s in latency_stats(predictions).items():
            latency_lines.append(
                f"{stage},{s.n},{s.minimum:.4f},{s.q1:.4f},{s.median:.4f},{s.q3:.4f},{s.maximum:.4f}"
            )
    _write_text(os.path.join(out_dir, "latency.csv"), latency_lines)

    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(metrics_obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return metrics_obj
