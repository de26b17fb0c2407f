import json

import pytest

from trustarb.runlog import iter_records
from trustarb.simulate import SyntheticAgent, parse_synthetic_agent, run_simulation


def test_parse_agent_specs():
    calibrated = parse_synthetic_agent("calibrated:0.9")
    assert calibrated == SyntheticAgent("calibrated", 0.9, None)
    over = parse_synthetic_agent("overconfident:0.5@0.95")
    assert over == SyntheticAgent("overconfident", 0.5, 0.95)
    with pytest.raises(ValueError):
        parse_synthetic_agent("nameonly")
    with pytest.raises(ValueError):
        parse_synthetic_agent("bad:1.5")


def test_confidence_model():
    calibrated = SyntheticAgent("c", 0.9)
    assert calibrated.confidence_for(True) == 0.95
    assert calibrated.confidence_for(False) == 0.85
    assert not calibrated.stubborn
    over = SyntheticAgent("o", 0.5, 0.95)
    assert over.confidence_for(True) == over.confidence_for(False) == 0.95
    assert over.stubborn


def test_simulation_artifacts(tmp_path):
    agents = [parse_synthetic_agent("calibrated:0.9"), parse_synthetic_agent("overconfident:0.5@0.95")]
    summary = run_simulation(str(tmp_path), agents, 100, 13)
    assert summary["test_size"] == 20
    for name in (
        "manifest.json",
        "summary.json",
        "train_predictions.jsonl",
        "truth_test.jsonl",
        "index/embeddings.manifest.json",
        "query_embeddings/embeddings.jsonl",
        "fixtures/calibrated.jsonl",
        "profiles/trust_profile_overconfident.json",
        "confidence/run.jsonl",
        "trust/run.jsonl",
        "trust/report/metrics.json",
    ):
        assert (tmp_path / name).exists(), name
    # the overconfident profile keeps trust below tau: every image re-evaluates
    traces = [r for r in iter_records(str(tmp_path / "trust")) if r["type"] == "trace"]
    assert len(traces) == 20
    assert all(t["triggered"] for t in traces)
    profile = json.loads((tmp_path / "profiles" / "trust_profile_overconfident.json").read_text())
    assert profile["thc"] == profile["n"]  # fixed 0.95 confidence is always above 0.9
