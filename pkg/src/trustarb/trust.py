"""Calibration and reliability statistics that make up an agent's trust profile.

All operations are pure functions over immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence


class EmptyLog(ValueError):
    """An operation that needs outcomes was handed none."""


class DegenerateLog(ValueError):
    """The outcome log lacks the variation the statistic requires."""


class LengthMismatch(ValueError):
    """Two aligned runs have different lengths."""


class ZeroMass(ValueError):
    """Total confidence mass is zero; a mass-weighted ratio is undefined."""


class MissingMetric(ValueError):
    """A trust score was requested from a profile with undefined components."""


@dataclass(frozen=True)
class ScoredOutcome:
    """One prediction reduced to its confidence and whether it was correct."""

    confidence: float
    correct: bool

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence out of [0,1]: {self.confidence}")


@dataclass(frozen=True)
class BinStat:
    """Occupancy of one equal-width confidence bin over (lo, hi]."""

    lo: float
    hi: float
    count: int
    mean_conf: float | None
    accuracy: float | None


class OcrResult(NamedTuple):
    ratio: float | None  # None when no prediction clears the threshold
    hcw: int
    thc: int


@dataclass(frozen=True)
class TrustProfile:
    """Per-agent calibration/reliability summary computed from a labeled log.

    Degenerate statistics are stored as None, never fabricated; the reasons
    are kept in `warnings` (not part of the serialized profile).
    """

    agent_id: str
    n: int
    accuracy: float
    avg_conf: float
    conf_correct: float | None
    conf_incorrect: float | None
    confidence_gap: float | None
    consistency_gap: float | None
    ocr: float | None
    hcw: int
    thc: int
    ccc: float | None
    ccc_p_value: float | None
    ece: float
    cwa: float | None
    warnings: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "n": self.n,
            "accuracy": self.accuracy,
            "avg_conf": self.avg_conf,
            "conf_correct": self.conf_correct,
            "conf_incorrect": self.conf_incorrect,
            "confidence_gap": self.confidence_gap,
            "consistency_gap": self.consistency_gap,
            "ocr": self.ocr,
            "hcw": self.hcw,
            "thc": self.thc,
            "ccc": self.ccc,
            "ccc_p_value": self.ccc_p_value,
            "ece": self.ece,
            "cwa": self.cwa,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "TrustProfile":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data and k != "warnings"}
        return cls(**known)


def bin_index(confidence: float, bins: int) -> int:
    """Bin assignment contract: bin m covers ((m-1)/M, m/M]; c=0 lands in bin 1."""
    return max(math.ceil(confidence * bins), 1)


def bin_stats(outcomes: Sequence[ScoredOutcome], bins: int) -> list[BinStat]:
    """Single-pass occupancy, mean confidence, and accuracy per bin."""
    if not outcomes:
        raise EmptyLog("no outcomes")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts = [0] * bins
    conf_sums = [0.0] * bins
    correct_sums = [0] * bins
    for o in outcomes:
        b = bin_index(o.confidence, bins) - 1
        counts[b] += 1
        conf_sums[b] += o.confidence
        correct_sums[b] += 1 if o.correct else 0
    stats = []
    for m in range(bins):
        c = counts[m]
        stats.append(
            BinStat(
                lo=m / bins,
                hi=(m + 1) / bins,
                count=c,
                mean_conf=conf_sums[m] / c if c else None,
                accuracy=correct_sums[m] / c if c else None,
            )
        )
    return stats


def ece(outcomes: Sequence[ScoredOutcome], bins: int = 10) -> float:
    """Expected calibration error: support-weighted |accuracy - mean confidence|."""
    stats = bin_stats(outcomes, bins)
    n = len(outcomes)
    total = 0.0
    for s in stats:
        if s.count:
            total += (s.count / n) * abs(s.accuracy - s.mean_conf)
    return total


def ocr(outcomes: Sequence[ScoredOutcome], threshold: float = 0.9) -> OcrResult:
    """Overconfidence ratio: wrong among strictly-above-threshold predictions.

    An empty high-confidence set yields ratio None (a value, not a failure).
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly inside (0, 1)")
    thc = sum(1 for o in outcomes if o.confidence > threshold)
    hcw = sum(1 for o in outcomes if o.confidence > threshold and not o.correct)
    return OcrResult(hcw / thc if thc else None, hcw, thc)


def confidence_gap(outcomes: Sequence[ScoredOutcome]) -> float:
    """Mean confidence on correct predictions minus mean on incorrect ones."""
    correct = [o.confidence for o in outcomes if o.correct]
    wrong = [o.confidence for o in outcomes if not o.correct]
    if not correct or not wrong:
        raise DegenerateLog("needs at least one correct and one incorrect outcome")
    return sum(correct) / len(correct) - sum(wrong) / len(wrong)


def consistency_gap(run1: Sequence[str], run2: Sequence[str]) -> float:
    """Fraction of aligned positions where two prompt-variant runs disagree."""
    if len(run1) != len(run2):
        raise LengthMismatch(f"{len(run1)} vs {len(run2)}")
    if not run1:
        raise EmptyLog("empty runs")
    return sum(1 for a, b in zip(run1, run2) if a != b) / len(run1)


def ccc(outcomes: Sequence[ScoredOutcome]) -> tuple[float, float]:
    """Point-biserial correlation between confidence and correctness, with p.

    p is the two-sided significance of t = r*sqrt((n-2)/(1-r^2)) against a
    Student-t distribution with n-2 degrees of freedom.
    """
    n = len(outcomes)
    if n < 3:
        raise DegenerateLog("needs n >= 3")
    xs = [o.confidence for o in outcomes]
    ys = [1.0 if o.correct else 0.0 for o in outcomes]
    # exact constant checks; mean-based variance can pick up summation noise
    if all(x == xs[0] for x in xs) or all(y == ys[0] for y in ys):
        raise DegenerateLog("zero variance in confidence or correctness")
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateLog("zero variance in confidence or correctness")
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    r = sxy / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    return r, _pearson_p_value(r, n)


def _pearson_p_value(r: float, n: int) -> float:
    df = n - 2
    if abs(r) >= 1.0:
        return 0.0
    t2 = r * r * df / (1.0 - r * r)
    return _reg_incomplete_beta(df / 2.0, 0.5, df / (df + t2))


def _reg_incomplete_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a,b) via the standard continued fraction."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _beta_cf(a, b, x) / a
    return 1.0 - bt * _beta_cf(b, a, 1.0 - x) / b


def _beta_cf(a: float, b: float, x: float) -> float:
    # Lentz's algorithm; converges in a few dozen iterations for our df range.
    max_iter, eps, fpmin = 300, 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def cwa(outcomes: Sequence[ScoredOutcome]) -> float:
    """Confidence-weighted accuracy: correct confidence mass over total mass."""
    total = sum(o.confidence for o in outcomes)
    if total <= 0.0:
        raise ZeroMass("total confidence mass is zero")
    return sum(o.confidence for o in outcomes if o.correct) / total


def build_trust_profile(
    agent_id: str,
    outcomes: Sequence[ScoredOutcome],
    *,
    ece_bins: int = 10,
    ocr_threshold: float = 0.9,
    paired_runs: tuple[Sequence[str], Sequence[str]] | None = None,
) -> TrustProfile:
    """Assemble the full per-agent profile; degenerate fields become None."""
    if not outcomes:
        raise EmptyLog("no outcomes")
    warnings: list[str] = []
    n = len(outcomes)
    correct = [o.confidence for o in outcomes if o.correct]
    wrong = [o.confidence for o in outcomes if not o.correct]
    accuracy = len(correct) / n
    avg_conf = sum(o.confidence for o in outcomes) / n
    conf_correct = sum(correct) / len(correct) if correct else None
    conf_incorrect = sum(wrong) / len(wrong) if wrong else None
    if conf_correct is not None and conf_incorrect is not None:
        gap = conf_correct - conf_incorrect
    else:
        gap = None
        warnings.append("confidence_gap undefined: all outcomes share one correctness")
    ocr_ratio, hcw, thc = ocr(outcomes, ocr_threshold)
    if ocr_ratio is None:
        warnings.append("ocr undefined: no prediction above the threshold")
    try:
        ccc_r, ccc_p = ccc(outcomes)
    except DegenerateLog as exc:
        ccc_r = ccc_p = None
        warnings.append(f"ccc undefined: {exc}")
    try:
        cwa_value = cwa(outcomes)
    except ZeroMass as exc:
        cwa_value = None
        warnings.append(f"cwa undefined: {exc}")
    cg = None
    if paired_runs is not None:
        cg = consistency_gap(*paired_runs)
    return TrustProfile(
        agent_id=agent_id,
        n=n,
        accuracy=accuracy,
        avg_conf=avg_conf,
        conf_correct=conf_correct,
        conf_incorrect=conf_incorrect,
        confidence_gap=gap,
        consistency_gap=cg,
        ocr=ocr_ratio,
        hcw=hcw,
        thc=thc,
        ccc=ccc_r,
        ccc_p_value=ccc_p,
        ece=ece(outcomes, ece_bins),
        cwa=cwa_value,
        warnings=tuple(warnings),
    )


def trust_score(profile: TrustProfile) -> float:
    """Aggregate a profile into one [0,1] reliability weight.

    Mean of {1-ece, 1-ocr, max(0, ccc), cwa}; an undefined ccc counts as 0,
    any other undefined component is an error.
    """
    for name in ("ece", "ocr", "cwa"):
        if getattr(profile, name) is None:
            raise MissingMetric(f"profile {profile.agent_id!r} lacks {name}")
    ccc_term = max(0.0, profile.ccc) if profile.ccc is not None else 0.0
    return (1.0 - profile.ece + 1.0 - profile.ocr + ccc_term + profile.cwa) / 4.0


TRUST_CSV_HEADER = "agent,acc,avg_conf,conf_corr,conf_incorr,cg,ocr,hcw,thc,ccc,p_val,ece,cwa"


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return format(value, ".4f")


def trust_profile_csv_row(profile: TrustProfile) -> str:
    """One CSV row in the reference column order; 4-decimal report rounding."""
    cells = [
        profile.agent_id,
        _csv_cell(profile.accuracy),
        _csv_cell(profile.avg_conf),
        _csv_cell(profile.conf_correct),
        _csv_cell(profile.conf_incorrect),
        _csv_cell(profile.confidence_gap),
        _csv_cell(profile.ocr),
        _csv_cell(profile.hcw),
        _csv_cell(profile.thc),
        _csv_cell(profile.ccc),
        _csv_cell(profile.ccc_p_value),
        _csv_cell(profile.ece),
        _csv_cell(profile.cwa),
    ]
    return ",".join(cells)
