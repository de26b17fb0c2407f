"""Deterministic end-to-end simulation harness.

Generates synthetic agents with configured accuracy/confidence behavior,
synthetic class-clustered embeddings, scripted fixtures, and trust profiles,
then executes both orchestration policies over the same test split. Under a
fixed seed the whole output directory is byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .core import LabelSet, ManualClock, Policy, Stage, default_label_set, write_jsonl, write_truth
from .dataset import RunManifest, SampleEntry, assign_splits, save_manifest
from .evaluation import emit_report, load_run
from .gateway import AgentSpec
from .orchestrator import run_experiment
from .trust import ScoredOutcome, TrustProfile, build_trust_profile, trust_score
from .vectorstore import EmbeddingRecord, build_index, knn_query, save_index, weighted_vote

DEFAULT_DIM = 32
DEFAULT_NOISE = 0.35


@dataclass(frozen=True)
class SyntheticAgent:
    """Behavior model: correct with probability `accuracy`; confidence either
    tracks correctness (accuracy +/- 0.05) or sits at a fixed value."""

    agent_id: str
    accuracy: float
    fixed_confidence: float | None = None

    def confidence_for(self, correct: bool) -> float:
        if self.fixed_confidence is not None:
            return self.fixed_confidence
        delta = 0.05 if correct else -0.05
        # 4-decimal grid keeps p+0.05 an exact tie against a fixed 0.95 agent
        return round(min(1.0, max(0.0, self.accuracy + delta)), 4)

    @property
    def stubborn(self) -> bool:
        # fixed-confidence agents ignore retrieval evidence and reaffirm
        return self.fixed_confidence is not None


def parse_synthetic_agent(arg: str) -> SyntheticAgent:
    """Parse 'name:accuracy' or 'name:accuracy@confidence'."""
    name, _, rest = arg.partition(":")
    if not name or not rest:
        raise ValueError(f"agent spec {arg!r} must look like name:accuracy[@confidence]")
    acc_part, _, conf_part = rest.partition("@")
    accuracy = float(acc_part)
    fixed = float(conf_part) if conf_part else None
    if not 0.0 <= accuracy <= 1.0 or (fixed is not None and not 0.0 <= fixed <= 1.0):
        raise ValueError(f"agent spec {arg!r} has values outside [0, 1]")
    return SyntheticAgent(agent_id=name, accuracy=accuracy, fixed_confidence=fixed)


def _agent_rng(seed: int, agent_id: str, purpose: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{agent_id}/{purpose}".encode()).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "big")])


def _wrong_label(rng: np.random.Generator, truth: str, labels: LabelSet) -> str:
    others = [lab for lab in labels if lab != truth]
    return others[int(rng.integers(len(others)))]


def _latency_ms(rng: np.random.Generator) -> float:
    return round(float(rng.lognormal(mean=math.log(400.0), sigma=0.4)), 3)


def _reply_json(category: str, confidence: float) -> str:
    return json.dumps(
        {
            "category": category,
            "justification": f"visual features consistent with {category}",
            "confidence": confidence,
        }
    )


def _relativize_snapshot(snapshot: dict, base_dir: str) -> dict:
    """Rewrite absolute paths relative to the config's directory so a run
    directory is byte-reproducible and portable."""

    def rel(p):
        return os.path.relpath(p, base_dir) if isinstance(p, str) and os.path.isabs(p) else p

    out = dict(snapshot)
    for key in ("index_path", "query_embeddings_path", "profiles_path"):
        out[key] = rel(out.get(key))
    out["agents"] = [dict(a, script_path=rel(a.get("script_path"))) for a in out["agents"]]
    if isinstance(out.get("orchestrator"), dict):
        out["orchestrator"] = dict(
            out["orchestrator"], script_path=rel(out["orchestrator"].get("script_path"))
        )
    return out


def _synthetic_embeddings(
    manifest: RunManifest, labels: LabelSet, seed: int, dim: int, noise: float
) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0xE5BED])
    prototypes = {}
    for lab in labels:
        v = rng.standard_normal(dim)
        prototypes[lab] = v / np.linalg.norm(v)
    scale = noise / math.sqrt(dim)
    out = {}
    for entry in manifest.samples:
        v = prototypes[entry.label] + scale * rng.standard_normal(dim)
        out[entry.image_id] = v / np.linalg.norm(v)
    return out


def run_simulation(
    out_dir: str,
    agents: list[SyntheticAgent],
    n: int,
    seed: int,
    *,
    labels: LabelSet | None = None,
    k: int = 5,
    tau: float = 0.7,
    dim: int = DEFAULT_DIM,
    noise: float = DEFAULT_NOISE,
) -> dict:
    """Full simulate flow; returns (and writes) the summary."""
    labels = labels or default_label_set()
    if n < len(labels):
        raise ValueError("need at least one sample per label")
    os.makedirs(out_dir, exist_ok=True)
    clock = ManualClock(0.0)

    # dataset: balanced labels, stratified deterministic split
    entries = []
    ids_by_label: dict[str, list[str]] = {lab: [] for lab in labels}
    for i in range(n):
        lab = labels.labels[i % len(labels)]
        image_id = f"img{i:05d}"
        ids_by_label[lab].append(image_id)
        entries.append((image_id, lab))
    assignment = assign_splits(ids_by_label, seed)
    manifest = RunManifest(
        run_id=f"sim-{seed}-{n}",
        created_at=clock.now(),
        seed=seed,
        ratios=(0.64, 0.16, 0.20),
        labels=tuple(labels),
        samples=tuple(
            SampleEntry(image_id=i, path="", label=lab, split=assignment[i]) for i, lab in entries
        ),
        config={"n": n, "seed": seed, "k": k, "tau": tau, "dim": dim, "noise": noise},
    )
    truth = manifest.truth()
    train_samples = manifest.samples_for("train")
    test_samples = manifest.samples_for("test")
    write_truth(os.path.join(out_dir, "truth_test.jsonl"), {s.image_id: truth[s.image_id] for s in test_samples})
    write_truth(os.path.join(out_dir, "truth_train.jsonl"), {s.image_id: truth[s.image_id] for s in train_samples})

    # embeddings: reference index over the training split, queries for test
    vectors = _synthetic_embeddings(manifest, labels, seed, dim, noise)
    train_records = [
        EmbeddingRecord(id=s.image_id, label=truth[s.image_id], vector=vectors[s.image_id])
        for s in train_samples
    ]
    test_records = [
        EmbeddingRecord(id=s.image_id, label=truth[s.image_id], vector=vectors[s.image_id])
        for s in test_samples
    ]
    index = build_index(train_records, dim=dim)
    index_path = os.path.join(out_dir, "index")
    save_index(index, index_path)
    query_path = os.path.join(out_dir, "query_embeddings")
    save_index(build_index(test_records, dim=dim), query_path)

    # retrieval votes the re-evaluation round will see (same code path)
    votes_by_image = {}
    vote_hits = 0
    for s in test_samples:
        hits = knn_query(index, vectors[s.image_id], k)
        votes = weighted_vote(hits, labels)
        votes_by_image[s.image_id] = votes
        if votes[0].category == truth[s.image_id]:
            vote_hits += 1

    # per-agent scripted fixtures (test split) and offline training log
    fixtures_dir = os.path.join(out_dir, "fixtures")
    os.makedirs(fixtures_dir, exist_ok=True)
    profiles: dict[str, TrustProfile] = {}
    train_log_records = []
    summary_agents: dict[str, dict] = {}
    for agent in agents:
        rng_train = _agent_rng(seed, agent.agent_id, "train")
        outcomes = []
        log_clock = ManualClock(0.0)
        for s in train_samples:
            correct = bool(rng_train.random() < agent.accuracy)
            category = truth[s.image_id] if correct else _wrong_label(rng_train, truth[s.image_id], labels)
            confidence = agent.confidence_for(correct)
            latency = _latency_ms(rng_train)
            log_clock.advance(latency / 1000.0)
            outcomes.append(ScoredOutcome(confidence=confidence, correct=correct))
            train_log_records.append(
                {
                    "image_id": s.image_id,
                    "agent_id": agent.agent_id,
                    "stage": Stage.INITIAL.value,
                    "category": category,
                    "confidence": confidence,
                    "justification": f"visual features consistent with {category}",
                    "latency_ms": latency,
                    "cost_usd": 0.0,
                    "attempts": 1,
                    "ts": log_clock.now(),
                }
            )
        profile = build_trust_profile(agent.agent_id, outcomes)
        profiles[agent.agent_id] = profile
        summary_agents[agent.agent_id] = {
            "train_accuracy": profile.accuracy,
            "trust_score": trust_score(profile),
        }

        rng_test = _agent_rng(seed, agent.agent_id, "test")
        fixture_lines = []
        for s in test_samples:
            correct = bool(rng_test.random() < agent.accuracy)
            category = truth[s.image_id] if correct else _wrong_label(rng_test, truth[s.image_id], labels)
            confidence = agent.confidence_for(correct)
            fixture_lines.append(
                {
                    "image_id": s.image_id,
                    "stage": Stage.INITIAL.value,
                    "reply": _reply_json(category, confidence),
                    "latency_ms": _latency_ms(rng_test),
                }
            )
            if agent.stubborn:
                re_category, re_confidence = category, confidence
            else:
                re_category = votes_by_image[s.image_id][0].category
                re_confidence = agent.confidence_for(re_category == truth[s.image_id])
            fixture_lines.append(
                {
                    "image_id": s.image_id,
                    "stage": Stage.REEVAL.value,
                    "reply": _reply_json(re_category, re_confidence),
                    "latency_ms": _latency_ms(rng_test),
                }
            )
        write_jsonl(os.path.join(fixtures_dir, f"{agent.agent_id}.jsonl"), fixture_lines)

    write_jsonl(os.path.join(out_dir, "train_predictions.jsonl"), train_log_records)
    profiles_dir = os.path.join(out_dir, "profiles")
    os.makedirs(profiles_dir, exist_ok=True)
    for agent_id, profile in sorted(profiles.items()):
        with open(
            os.path.join(profiles_dir, f"trust_profile_{agent_id}.json"), "w", encoding="utf-8", newline="\n"
        ) as fh:
            json.dump(profile.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    # both policies over the identical fixtures
    agent_specs = tuple(
        AgentSpec(
            agent_id=a.agent_id,
            kind="scripted",
            script_path=os.path.join(fixtures_dir, f"{a.agent_id}.jsonl"),
        )
        for a in agents
    )
    policy_summaries = {}
    per_policy_dirs = {}
    for policy, subdir in ((Policy.CONFIDENCE_AWARE, "confidence"), (Policy.TRUST_AWARE_RAG, "trust")):
        run_dir = os.path.join(out_dir, subdir)
        config = ExperimentConfig(
            label_set=labels,
            agents=agent_specs,
            seed=seed,
            policy=policy,
            k=k,
            tau=tau,
            index_path=index_path if policy is Policy.TRUST_AWARE_RAG else None,
            query_embeddings_path=query_path if policy is Policy.TRUST_AWARE_RAG else None,
        )
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(_relativize_snapshot(config.snapshot(), run_dir), fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_truth(
            os.path.join(run_dir, "truth.jsonl"),
            {s.image_id: truth[s.image_id] for s in test_samples},
        )
        run_summary = run_experiment(
            config,
            test_samples,
            run_dir,
            ManualClock(0.0),
            profiles=profiles if policy is Policy.TRUST_AWARE_RAG else None,
        )
        emit_report(run_dir, truth, labels)
        policy_summaries[policy.value] = run_summary
        per_policy_dirs[policy.value] = run_dir

    # accuracy roll-up for the summary
    def _decision_accuracy(run_dir: str) -> float:
        _, _, decisions, _ = load_run(run_dir)
        scored = [d for d in decisions if d.image_id in truth]
        return sum(1 for d in scored if d.category == truth[d.image_id]) / len(scored)

    trust_preds, _, _, _ = load_run(per_policy_dirs[Policy.TRUST_AWARE_RAG.value])
    for agent in agents:
        initial = [p for p in trust_preds if p.agent_id == agent.agent_id and p.stage is Stage.INITIAL]
        latest: dict[str, str] = {p.image_id: p.category for p in initial}
        for p in trust_preds:
            if p.agent_id == agent.agent_id and p.stage is Stage.REEVAL:
                latest[p.image_id] = p.category
        summary_agents[agent.agent_id]["test_initial_accuracy"] = sum(
            1 for p in initial if p.category == truth[p.image_id]
        ) / len(initial)
        summary_agents[agent.agent_id]["test_latest_accuracy"] = sum(
            1 for img, cat in latest.items() if cat == truth[img]
        ) / len(latest)

    summary = {
        "seed": seed,
        "n": n,
        "test_size": len(test_samples),
        "k": k,
        "tau": tau,
        "vote_top1_accuracy": vote_hits / len(test_samples),
        "agents": summary_agents,
        "policies": {
            "confidence_aware": {
                "accuracy": _decision_accuracy(per_policy_dirs["confidence_aware"]),
                **policy_summaries["confidence_aware"],
            },
            "trust_aware_rag": {
                "accuracy": _decision_accuracy(per_policy_dirs["trust_aware_rag"]),
                **policy_summaries["trust_aware_rag"],
            },
        },
    }
    save_manifest(manifest, out_dir)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
