import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_profile, reply_json, write_fixture_file
from trustarb.config import ConfigError, ExperimentConfig
from trustarb.core import (
    AgentPrediction,
    ManualClock,
    Policy,
    Sample,
    Stage,
    default_label_set,
)
from trustarb.gateway import AgentSpec, ScriptedAgent
from trustarb.orchestrator import (
    ArbitrationInput,
    IndexUnavailable,
    NoPredictions,
    PipelineRunner,
    render_orchestrator_prompt,
    rule_arbitrate,
    run_experiment,
    run_trust_pipeline,
    should_reevaluate,
)
from trustarb.runlog import RunLogWriter, iter_records
from trustarb.trust import trust_score
from trustarb.vectorstore import ClassVote, EmbeddingRecord, build_index, save_index

LABELS = default_label_set()


def pred(agent_id, category, confidence, stage=Stage.INITIAL, image_id="img1"):
    return AgentPrediction(agent_id, image_id, stage, category, confidence, f"{category} signs")


def arb_input(preds, profiles=None, votes=None):
    return ArbitrationInput(
        image_id=preds[0].image_id,
        predictions=tuple(preds),
        labels=LABELS,
        profiles=profiles,
        votes=votes,
    )


# -- should_reevaluate -----------------------------------------------------------


def test_should_reevaluate_reference_scores():
    assert should_reevaluate({"qwen": 0.415, "gpt": 0.561}, 0.7) is True


def test_should_reevaluate_above_threshold():
    assert should_reevaluate({"a": 0.86, "b": 0.9}, 0.7) is False


def test_should_reevaluate_zero_tau_never_fires():
    assert should_reevaluate({"a": 0.0, "b": 0.9}, 0.0) is False


# -- rule_arbitrate ---------------------------------------------------------------


def test_argmax_confidence_without_profiles():
    decision = rule_arbitrate(arb_input([pred("A", "scab", 0.9), pred("B", "rust", 0.8)]))
    assert decision.category == "scab"
    assert decision.confidence == 0.9
    assert decision.policy is Policy.RULE_FALLBACK
    assert decision.reeval_triggered is False


def test_trust_weighted_argmax():
    profiles = {
        "A": make_profile("A", 0.453, 0.508, 0.126, 0.495),  # trust 0.415
        "B": make_profile("B", 0.293, 0.416, 0.361, 0.592),  # trust 0.561
    }
    decision = rule_arbitrate(
        arb_input([pred("A", "scab", 0.9), pred("B", "rust", 0.8)], profiles=profiles)
    )
    # 0.9 * 0.415 = 0.374 < 0.8 * 0.561 = 0.449
    assert decision.category == "rust"


def test_tie_breaks_on_canonical_label_order():
    decision = rule_arbitrate(arb_input([pred("A", "scab", 0.8), pred("B", "black-rot", 0.8)]))
    assert decision.category == "black-rot"


def test_equal_label_tie_breaks_on_agent_id():
    decision = rule_arbitrate(arb_input([pred("B", "scab", 0.8), pred("A", "scab", 0.8)]))
    assert decision.contributing[0][0] == "A"
    assert decision.category == "scab"


def test_no_predictions():
    with pytest.raises(NoPredictions):
        rule_arbitrate(ArbitrationInput("img1", (), LABELS))


def test_vote_override_when_low_trust():
    profiles = {"A": make_profile("A", 0.453, 0.508, 0.126, 0.495)}  # trust 0.415 < tau
    votes = (ClassVote("rust", 0.8), ClassVote("scab", 0.2))
    decision = rule_arbitrate(
        arb_input([pred("A", "scab", 0.9)], profiles=profiles, votes=votes), tau=0.7
    )
    assert decision.category == "rust"
    assert decision.confidence == 0.8


def test_vote_does_not_override_trusted_agent():
    profiles = {"A": make_profile("A", 0.05, 0.05, 0.8, 0.95)}  # trust 0.9125
    votes = (ClassVote("rust", 0.8),)
    decision = rule_arbitrate(
        arb_input([pred("A", "scab", 0.9)], profiles=profiles, votes=votes), tau=0.7
    )
    assert decision.category == "scab"


def test_single_agent_identity():
    lone = pred("only", "healthy", 0.42)
    decision = rule_arbitrate(arb_input([lone]))
    assert decision.category == lone.category
    assert decision.confidence == lone.confidence


@given(
    st.lists(
        st.tuples(
            st.sampled_from(LABELS.labels),
            st.floats(min_value=0, max_value=1, allow_nan=False),
        ),
        min_size=1,
        max_size=5,
    ),
    st.randoms(use_true_random=False),
)
def test_arbitration_is_permutation_invariant(entries, rnd):
    preds = [pred(f"agent{i}", lab, conf) for i, (lab, conf) in enumerate(entries)]
    baseline = rule_arbitrate(arb_input(preds))
    shuffled = list(preds)
    rnd.shuffle(shuffled)
    assert rule_arbitrate(arb_input(shuffled)) == baseline


# -- orchestrator prompt -----------------------------------------------------------


def test_orchestrator_prompt_lists_agents_and_profiles():
    profiles = {"A": make_profile("A", 0.29, 0.41, 0.36, 0.59), "B": make_profile("B", 0.45, 0.50, 0.12, 0.49)}
    prompt = render_orchestrator_prompt(
        arb_input([pred("A", "scab", 0.9), pred("B", "rust", 0.8)], profiles=profiles)
    )
    assert '"A"' in prompt and '"B"' in prompt
    assert "ECE" in prompt
    assert '"rationale"' in prompt


# -- pipeline integration ------------------------------------------------------------


def synthetic_corpus(tmp_path, n_samples, reeval_category=None):
    """Samples, index dir, query embedding map, and agent fixture entries."""
    rng = np.random.default_rng(42)
    protos = {lab: rng.standard_normal(8) for lab in LABELS}
    for lab, v in protos.items():
        protos[lab] = v / np.linalg.norm(v)

    def embed(label):
        v = protos[label] + 0.05 * rng.standard_normal(8)
        return v / np.linalg.norm(v)

    samples = []
    for i in range(n_samples):
        label = LABELS.labels[i % len(LABELS)]
        samples.append(Sample(image_id=f"img{i:03d}", true_label=label))
    ref_records = [
        EmbeddingRecord(id=f"ref{j:03d}", label=LABELS.labels[j % len(LABELS)], vector=embed(LABELS.labels[j % len(LABELS)]))
        for j in range(16)
    ]
    index_dir = tmp_path / "index"
    save_index(build_index(list(ref_records)), str(index_dir))
    queries = {s.image_id: embed(s.true_label) for s in samples}
    return samples, str(index_dir), queries


def agent_fixture(tmp_path, agent_id, samples, category_fn, confidence, reeval_fn=None):
    entries = []
    for s in samples:
        cat = category_fn(s)
        entries.append(
            {"image_id": s.image_id, "stage": "initial", "reply": reply_json(cat, confidence), "latency_ms": 50.0}
        )
        re_cat = reeval_fn(s, cat) if reeval_fn else cat
        entries.append(
            {"image_id": s.image_id, "stage": "reeval", "reply": reply_json(re_cat, confidence), "latency_ms": 30.0}
        )
    path = tmp_path / f"{agent_id}.jsonl"
    write_fixture_file(path, entries)
    return AgentSpec(agent_id=agent_id, kind="scripted", script_path=str(path))


LOW_PROFILES = {
    "truthy": make_profile("truthy", 0.453, 0.508, 0.126, 0.495),
    "rusty": make_profile("rusty", 0.293, 0.416, 0.361, 0.592),
}


def trust_config(agents, index_dir=None, tau=0.7):
    return ExperimentConfig(
        label_set=LABELS,
        agents=tuple(agents),
        seed=7,
        policy=Policy.TRUST_AWARE_RAG,
        k=5,
        tau=tau,
        index_path=index_dir,
    )


def test_trust_pipeline_triggers_and_reaffirms(tmp_path):
    samples, index_dir, queries = synthetic_corpus(tmp_path, 8)
    truthy = agent_fixture(tmp_path, "truthy", samples, lambda s: s.true_label, 0.9)
    rusty = agent_fixture(tmp_path, "rusty", samples, lambda s: "rust", 0.95)
    config = trust_config([truthy, rusty], index_dir)
    from trustarb.vectorstore import load_index

    index = load_index(index_dir)
    clock = ManualClock(0.0)
    for sample in samples:
        decision, trace = run_trust_pipeline(
            sample, LOW_PROFILES, index, config, clock, query_embeddings=queries
        )
        assert trace.triggered is True  # reference profiles sit below tau
        assert trace.votes
        assert abs(sum(v.confidence for v in trace.votes) - 1.0) < 1e-9
        ro = trace.rounds["rusty"]
        assert ro.revised is not None and ro.changed is False  # reaffirmation
        assert decision is not None
        assert trace.triggered == (min(trace.trust_scores.values()) < config.tau)


def test_trust_pipeline_no_trigger_equals_confidence_path(tmp_path):
    samples, index_dir, queries = synthetic_corpus(tmp_path, 8)
    truthy = agent_fixture(tmp_path, "truthy", samples, lambda s: s.true_label, 0.9)
    rusty = agent_fixture(tmp_path, "rusty", samples, lambda s: "rust", 0.95)
    # equal high-trust profiles: trust weighting preserves the confidence order
    high = {
        "truthy": make_profile("truthy", 0.03, 0.03, 0.8, 0.95),
        "rusty": make_profile("rusty", 0.03, 0.03, 0.8, 0.95),
    }
    assert trust_score(high["truthy"]) >= 0.7
    config = trust_config([truthy, rusty], index_dir)
    from trustarb.vectorstore import load_index

    index = load_index(index_dir)
    trust_decisions = []
    for sample in samples:
        decision, trace = run_trust_pipeline(
            sample, high, index, config, ManualClock(), query_embeddings=queries
        )
        assert trace.triggered is False
        assert trace.votes == ()
        assert all(r.revised is None for r in trace.rounds.values())
        trust_decisions.append(decision)

    confidence_config = ExperimentConfig(
        label_set=LABELS, agents=config.agents, seed=7, policy=Policy.CONFIDENCE_AWARE
    )
    runner = PipelineRunner(confidence_config, ManualClock())
    for sample, trust_decision in zip(samples, trust_decisions):
        conf_decision, _ = runner.run_sample(sample)
        assert conf_decision.category == trust_decision.category


def test_run_experiment_counts_and_resume(tmp_path):
    samples, index_dir, queries = synthetic_corpus(tmp_path, 12)
    truthy = agent_fixture(tmp_path, "truthy", samples, lambda s: s.true_label, 0.9)
    config = ExperimentConfig(label_set=LABELS, agents=(truthy,), seed=1)
    out = tmp_path / "run"
    first = run_experiment(config, samples[:6], str(out), ManualClock())
    assert first["decided"] == 6
    # fixture cursors restart with a fresh runner; resume skips settled images
    truthy2 = agent_fixture(tmp_path, "truthy", samples, lambda s: s.true_label, 0.9)
    config2 = ExperimentConfig(label_set=LABELS, agents=(truthy2,), seed=1)
    second = run_experiment(config2, samples, str(out), ManualClock())
    assert second["skipped"] == 6
    assert second["decided"] == 6
    decisions = [r for r in iter_records(str(out)) if r["type"] == "decision"]
    assert len(decisions) == 12


def test_trust_policy_without_index_fails_fast(tmp_path):
    samples, _, _ = synthetic_corpus(tmp_path, 4)
    truthy = agent_fixture(tmp_path, "truthy", samples, lambda s: s.true_label, 0.9)
    config = trust_config([truthy], index_dir=None)
    with pytest.raises(IndexUnavailable):
        run_experiment(config, samples, str(tmp_path / "run"), ManualClock())


def test_trust_policy_unscoreable_profile_fails_fast(tmp_path):
    # an agent that never clears the overconfidence threshold has no OCR,
    # which makes its profile unscoreable; that must surface before any call
    samples, index_dir, queries = synthetic_corpus(tmp_path, 4)
    truthy = agent_fixture(tmp_path, "truthy", samples, lambda s: s.true_label, 0.9)
    config = trust_config([truthy], index_dir)
    import dataclasses

    no_ocr = dataclasses.replace(LOW_PROFILES["truthy"], ocr=None, hcw=0, thc=0)
    with pytest.raises(ConfigError, match="cannot be scored"):
        run_experiment(
            config,
            samples,
            str(tmp_path / "run"),
            ManualClock(),
            profiles={"truthy": no_ocr},
            query_embeddings=queries,
        )


def test_trust_policy_missing_embeddings_fails_fast(tmp_path):
    samples, index_dir, queries = synthetic_corpus(tmp_path, 4)
    truthy = agent_fixture(tmp_path, "truthy", samples, lambda s: s.true_label, 0.9)
    config = trust_config([truthy], index_dir)
    queries.pop(samples[0].image_id)
    with pytest.raises(ConfigError):
        run_experiment(
            config,
            samples,
            str(tmp_path / "run"),
            ManualClock(),
            profiles={"truthy": LOW_PROFILES["truthy"]},
            query_embeddings=queries,
        )


def test_all_agents_exhausted_adopts_top_vote(tmp_path):
    # every agent fails to parse at every attempt; the triggered retrieval
    # votes still settle the image under the rule-fallback policy
    samples, index_dir, queries = synthetic_corpus(tmp_path, 4)
    entries = []
    for s in samples:
        for stage in ("initial", "reeval"):
            entries.append({"image_id": s.image_id, "stage": stage, "reply": "never valid json"})
    path = tmp_path / "broken.jsonl"
    write_fixture_file(path, entries)
    broken = AgentSpec(agent_id="truthy", kind="scripted", script_path=str(path), retry_cap=1)
    config = trust_config([broken], index_dir)
    out = tmp_path / "run"
    from trustarb.vectorstore import load_index

    summary = run_experiment(
        config,
        samples,
        str(out),
        ManualClock(),
        profiles={"truthy": LOW_PROFILES["truthy"]},
        query_embeddings=queries,
    )
    assert summary["decided"] == 4 and summary["undecided"] == 0
    assert summary["format_exhausted"] == 4
    decisions = [r for r in iter_records(str(out)) if r["type"] == "decision"]
    index = load_index(index_dir)
    from trustarb.vectorstore import knn_query, weighted_vote

    for d in decisions:
        votes = weighted_vote(knn_query(index, queries[d["image_id"]], config.k), LABELS)
        assert d["category"] == votes[0].category
        assert d["policy"] == "rule_fallback"
        assert d["contributing"] == []


def test_reeval_only_follows_initial_in_logs(tmp_path):
    # stage monotonicity over the persisted log: a reeval prediction record
    # implies an initial record for the same (agent, image)
    samples, index_dir, queries = synthetic_corpus(tmp_path, 6)
    truthy = agent_fixture(tmp_path, "truthy", samples, lambda s: s.true_label, 0.9)
    config = trust_config([truthy], index_dir)
    out = tmp_path / "run"
    run_experiment(
        config,
        samples,
        str(out),
        ManualClock(),
        profiles={"truthy": LOW_PROFILES["truthy"]},
        query_embeddings=queries,
    )
    seen_initial = set()
    for rec in iter_records(str(out)):
        if rec["type"] != "prediction":
            continue
        key = (rec["agent_id"], rec["image_id"])
        if rec["stage"] == "initial":
            seen_initial.add(key)
        else:
            assert key in seen_initial


def test_scripted_orchestrator_never_sees_images(tmp_path):
    samples, index_dir, queries = synthetic_corpus(tmp_path, 6)
    truthy = agent_fixture(tmp_path, "truthy", samples, lambda s: s.true_label, 0.9)
    orch_entries = [
        {
            "image_id": s.image_id,
            "stage": "initial",
            "reply": reply_json(s.true_label, 0.88, text_key="rationale"),
        }
        for s in samples
    ]
    orch_path = tmp_path / "orch.jsonl"
    write_fixture_file(orch_path, orch_entries)
    orch_spec = AgentSpec(agent_id="arbiter", kind="scripted", script_path=str(orch_path))
    config = ExperimentConfig(
        label_set=LABELS,
        agents=(truthy,),
        seed=3,
        orchestrator=orch_spec,
        policy=Policy.TRUST_AWARE_RAG,
        index_path=index_dir,
    )
    orch_transport = ScriptedAgent(str(orch_path), record_requests=True)
    out = tmp_path / "run_orch"
    run_experiment(
        config,
        samples,
        str(out),
        ManualClock(),
        profiles={"truthy": LOW_PROFILES["truthy"]},
        query_embeddings=queries,
        orchestrator_transport=orch_transport,
    )
    assert orch_transport.requests  # the arbiter was actually consulted
    for request in orch_transport.requests:
        assert request.image_payload is None
    decisions = [r for r in iter_records(str(out)) if r["type"] == "decision"]
    assert all(d["policy"] == "trust_aware_rag" for d in decisions)
    assert all(d["reeval_triggered"] for d in decisions)
