import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from trustarb.core import (
    AgentPrediction,
    FinalDecision,
    LabelSet,
    ManualClock,
    Policy,
    Stage,
    UnknownLabel,
    canonicalize_label,
    default_label_set,
    prediction_from_record,
    prediction_to_record,
)

LABELS = default_label_set()


def test_canonicalize_normalization_identity():
    assert canonicalize_label("Black Rot", LABELS) == "black-rot"
    assert canonicalize_label("black_rot", LABELS) == "black-rot"
    assert canonicalize_label("  BLACK-ROT ", LABELS) == "black-rot"


def test_canonicalize_identity_case():
    assert canonicalize_label("scab", LABELS) == "scab"


def test_canonicalize_unknown():
    with pytest.raises(UnknownLabel):
        canonicalize_label("mildew", LABELS)
    with pytest.raises(UnknownLabel):
        canonicalize_label("   ", LABELS)


@given(st.text(min_size=1))
def test_canonicalize_idempotent(raw):
    try:
        first = canonicalize_label(raw, LABELS)
    except UnknownLabel:
        return
    assert canonicalize_label(first, LABELS) == first


def test_label_set_validation():
    with pytest.raises(ValueError):
        LabelSet(("only",))
    with pytest.raises(ValueError):
        LabelSet(("a", "a"))
    with pytest.raises(ValueError):
        LabelSet(("a", "Not Canonical"))
    assert LABELS.rank("healthy") == 0
    assert LABELS.rank("scab") == 3


def test_prediction_validation():
    with pytest.raises(ValueError):
        AgentPrediction("a", "i", Stage.INITIAL, "scab", 1.2, "x")
    with pytest.raises(ValueError):
        AgentPrediction("a", "i", Stage.INITIAL, "scab", 0.5, "x", attempts=0)
    with pytest.raises(ValueError):
        AgentPrediction("a", "i", Stage.INITIAL, "scab", 0.5, "x", latency_ms=-1)


def test_decision_policy_invariant():
    with pytest.raises(ValueError):
        FinalDecision("i", "scab", 0.9, "r", Policy.CONFIDENCE_AWARE, reeval_triggered=True)
    ok = FinalDecision("i", "scab", 0.9, "r", Policy.TRUST_AWARE_RAG, reeval_triggered=True)
    assert ok.reeval_triggered


predictions = st.builds(
    AgentPrediction,
    agent_id=st.text(min_size=1, max_size=8),
    image_id=st.text(min_size=1, max_size=8),
    stage=st.sampled_from(list(Stage)),
    category=st.sampled_from(LABELS.labels),
    confidence=st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
    justification=st.text(max_size=40),
    latency_ms=st.floats(min_value=0.0, max_value=1e6, allow_nan=False),
    cost_usd=st.floats(min_value=0.0, max_value=10.0, allow_nan=False),
    attempts=st.integers(min_value=1, max_value=4),
)


@given(predictions, st.floats(min_value=0, max_value=1e9, allow_nan=False))
def test_prediction_record_round_trip(pred, ts):
    line = json.dumps(prediction_to_record(pred, ts))
    back, back_ts = prediction_from_record(json.loads(line))
    assert back == pred
    assert back_ts == ts


def test_prediction_record_field_names():
    pred = AgentPrediction("gpt", "img1", Stage.INITIAL, "scab", 0.9, "lesions")
    record = prediction_to_record(pred, 1.5)
    assert list(record) == [
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
    ]


def test_manual_clock_monotonic():
    clock = ManualClock(10.0)
    stamps = [clock.now()]
    clock.advance(0.5)
    stamps.append(clock.now())
    clock.advance(0.0)
    stamps.append(clock.now())
    assert stamps == [10.0, 10.5, 10.5]
    with pytest.raises(ValueError):
        clock.advance(-1)
