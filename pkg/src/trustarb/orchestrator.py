"""The decision core: confidence-aware arbitration, trust-aware arbitration
with retrieval-grounded re-evaluation, and the deterministic rule fallback.

One re-evaluation round at most per image; unbounded loops risk oscillating
between revisions.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Mapping, Sequence

from .config import ConfigError, ExperimentConfig
from .core import (
    AgentPrediction,
    Clock,
    FinalDecision,
    LabelSet,
    Policy,
    Sample,
    Stage,
    prediction_from_record,
)
from .gateway import (
    AgentRequest,
    AgentUnreachable,
    FormatExhausted,
    make_transport,
    invoke_with_retries,
    parse_agent_reply,
    render_agent_prompt,
    render_reeval_prompt,
)
from .runlog import RunLogWriter, settled_image_ids
from .trust import MissingMetric, TrustProfile, trust_score
from .vectorstore import ClassVote, VectorIndex, knn_query, load_embedding_map, load_index, ranked_votes_json, weighted_vote


class NoPredictions(ValueError):
    pass


class IndexUnavailable(RuntimeError):
    """Re-evaluation is configured but no vector index is available."""


@dataclass(frozen=True)
class AgentRound:
    """One agent's trajectory through a re-evaluation cycle."""

    initial: AgentPrediction
    revised: AgentPrediction | None = None

    @property
    def changed(self) -> bool:
        return self.revised is not None and self.revised.category != self.initial.category

    @property
    def latest(self) -> AgentPrediction:
        return self.revised if self.revised is not None else self.initial


@dataclass(frozen=True)
class ReEvalTrace:
    image_id: str
    triggered: bool
    trust_scores: dict[str, float]
    tau_used: float
    votes: tuple[ClassVote, ...]
    rounds: dict[str, AgentRound]

    def to_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "triggered": self.triggered,
            "trust_scores": dict(sorted(self.trust_scores.items())),
            "tau_used": self.tau_used,
            "votes": [{"category": v.category, "confidence": v.confidence} for v in self.votes],
            "agents": {
                aid: {
                    "initial": {"category": r.initial.category, "confidence": r.initial.confidence},
                    "revised": (
                        {"category": r.revised.category, "confidence": r.revised.confidence}
                        if r.revised is not None
                        else None
                    ),
                    "changed": r.changed,
                }
                for aid, r in sorted(self.rounds.items())
            },
        }


@dataclass(frozen=True)
class ArbitrationInput:
    image_id: str
    predictions: tuple[AgentPrediction, ...]  # stage-latest, one per agent
    labels: LabelSet
    profiles: Mapping[str, TrustProfile] | None = None
    votes: tuple[ClassVote, ...] | None = None


def should_reevaluate(trust_scores: Mapping[str, float], tau: float) -> bool:
    """True iff any agent's trust score falls below the threshold."""
    if not trust_scores:
        return False
    return min(trust_scores.values()) < tau


def render_orchestrator_prompt(inp: ArbitrationInput) -> str:
    """Text-only arbitration prompt; never carries an image payload."""
    blocks = []
    for pred in sorted(inp.predictions, key=lambda p: p.agent_id):
        blocks.append(
            f'Agent "{pred.agent_id}" ({pred.stage.value} stage): category={pred.category}, '
            f"confidence={pred.confidence}, justification: {pred.justification}"
        )
        if inp.profiles and pred.agent_id in inp.profiles:
            prof = inp.profiles[pred.agent_id]
            score = _safe_trust_score(prof)
            blocks.append(
                f'Agent "{pred.agent_id}" trust profile: accuracy={prof.accuracy:.4f}, '
                f"ECE={_fmt(prof.ece)}, OCR={_fmt(prof.ocr)}, CCC={_fmt(prof.ccc)}, "
                f"CWA={_fmt(prof.cwa)}, trust score={_fmt(score)}"
            )
    vote_block = ""
    if inp.votes:
        vote_block = (
            "\nA retrieval system over labeled reference images produced these "
            "similarity-weighted class votes, ranked:\n" + ranked_votes_json(list(inp.votes)) + "\n"
        )
    agent_lines = "\n".join(blocks)
    return (
        f"You are the arbitration layer of a visual classification system. For image "
        f"{inp.image_id}, the classification agents reported:\n"
        f"{agent_lines}\n"
        f"{vote_block}\n"
        "You cannot see the image. Weigh each agent's reliability and reasoning "
        "and issue the final classification. Reply with a single JSON object and "
        'nothing else, with exactly these keys: {"category": "<category>", '
        '"rationale": "<why you chose it>", "confidence": <number in [0, 1]>}.'
    )


def _fmt(value) -> str:
    return "undefined" if value is None else f"{value:.4f}"


def _safe_trust_score(profile: TrustProfile) -> float | None:
    try:
        return trust_score(profile)
    except Exception:
        return None


def rule_arbitrate(
    inp: ArbitrationInput, tau: float = 0.7, reeval_triggered: bool = False
) -> FinalDecision:
    """Deterministic fallback arbitration.

    Without profiles: argmax confidence. With profiles: argmax confidence x
    trust score. With votes: side with the top vote when the picked agent is
    below the trust threshold and a >=0.5-confidence vote disagrees. All ties
    break on canonical label order, then agent id, so agent ordering never
    matters.
    """
    if not inp.predictions:
        raise NoPredictions(inp.image_id)

    def weight(pred: AgentPrediction) -> float:
        if inp.profiles and pred.agent_id in inp.profiles:
            score = _safe_trust_score(inp.profiles[pred.agent_id])
            if score is not None:
                return pred.confidence * score
        return pred.confidence

    ranked = sorted(
        inp.predictions, key=lambda p: (-weight(p), inp.labels.rank(p.category), p.agent_id)
    )
    winner = ranked[0]
    category, confidence = winner.category, winner.confidence
    rationale = (
        f"rule fallback: highest-weighted agent {winner.agent_id!r} "
        f"picked {category!r} with confidence {winner.confidence:.4f}"
    )
    if inp.votes:
        top = inp.votes[0]
        winner_score = None
        if inp.profiles and winner.agent_id in inp.profiles:
            winner_score = _safe_trust_score(inp.profiles[winner.agent_id])
        if (
            top.category != category
            and top.confidence >= 0.5
            and winner_score is not None
            and winner_score < tau
        ):
            category, confidence = top.category, top.confidence
            rationale = (
                f"rule fallback: retrieval vote {top.category!r} "
                f"({top.confidence:.4f}) overrides low-trust agent {winner.agent_id!r} "
                f"(trust {winner_score:.4f} < {tau})"
            )
    contributing = tuple(
        (p.agent_id, p.stage) for p in sorted(inp.predictions, key=lambda p: p.agent_id)
    )
    return FinalDecision(
        image_id=inp.image_id,
        category=category,
        confidence=confidence,
        rationale=rationale,
        policy=Policy.RULE_FALLBACK,
        reeval_triggered=reeval_triggered,
        contributing=contributing,
    )


class _NullWriter:
    def log_prediction(self, *a, **k): ...
    def log_trace(self, *a, **k): ...
    def log_decision(self, *a, **k): ...
    def log_undecided(self, *a, **k): ...
    def log_agent_error(self, *a, **k): ...


_MEDIA_TYPES = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg"}


class PipelineRunner:
    """Executes the configured policy sample by sample.

    Scripted transports keep state across calls (fixture cursors), so one
    runner owns one transport per agent for the whole run.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        clock: Clock,
        writer=None,
        *,
        profiles: Mapping[str, TrustProfile] | None = None,
        index: VectorIndex | None = None,
        query_embeddings: Mapping | None = None,
        transports: Mapping[str, object] | None = None,
        orchestrator_transport=None,
    ):
        self.config = config
        self.clock = clock
        self.writer = writer if writer is not None else _NullWriter()
        self.profiles = dict(profiles) if profiles else None
        self.index = index
        self.query_embeddings = query_embeddings
        self.transports = {
            spec.agent_id: (transports or {}).get(spec.agent_id) or make_transport(spec)
            for spec in config.agents
        }
        self.orchestrator_transport = orchestrator_transport
        if config.orchestrator is not None and orchestrator_transport is None:
            self.orchestrator_transport = make_transport(config.orchestrator)
        self.counters = {"format_exhausted": 0, "agent_unreachable": 0}
        if config.policy is Policy.TRUST_AWARE_RAG:
            if self.index is None:
                raise IndexUnavailable("trust_aware_rag policy requires a vector index")
            missing = [s.agent_id for s in config.agents if not self.profiles or s.agent_id not in self.profiles]
            if missing:
                raise ConfigError(f"trust profiles missing for agents: {missing}")
            for agent_id in sorted(self.profiles):
                try:
                    trust_score(self.profiles[agent_id])
                except MissingMetric as exc:
                    raise ConfigError(
                        f"profile for agent {agent_id!r} cannot be scored: {exc}"
                    ) from exc

    # -- per-sample stages -------------------------------------------------

    def _payload(self, spec, sample: Sample) -> tuple[bytes | None, str]:
        if spec.kind != "remote" or sample.image_ref is None:
            return None, "image/jpeg"
        if isinstance(sample.image_ref, bytes):
            return sample.image_ref, "image/jpeg"
        ext = os.path.splitext(str(sample.image_ref))[1].lower()
        with open(sample.image_ref, "rb") as fh:
            return fh.read(), _MEDIA_TYPES.get(ext, "image/jpeg")

    def _invoke(self, spec, transport, request: AgentRequest) -> AgentPrediction | None:
        parser = lambda text: parse_agent_reply(text, self.config.label_set)
        try:
            pred = invoke_with_retries(spec, request, parser, self.clock, transport)
        except FormatExhausted as exc:
            self.counters["format_exhausted"] += 1
            self.writer.log_agent_error(spec.agent_id, request.image_id, request.stage, str(exc), self.clock.now())
            return None
        except AgentUnreachable as exc:
            self.counters["agent_unreachable"] += 1
            self.writer.log_agent_error(spec.agent_id, request.image_id, request.stage, str(exc), self.clock.now())
            return None
        self.writer.log_prediction(pred, self.clock.now())
        return pred

    def _initial_round(self, sample: Sample) -> dict[str, AgentPrediction]:
        prompt = render_agent_prompt(self.config.label_set)
        out: dict[str, AgentPrediction] = {}
        for spec in self.config.agents:
            payload, media = self._payload(spec, sample)
            request = AgentRequest(
                image_id=sample.image_id,
                prompt_text=prompt,
                stage=Stage.INITIAL,
                image_payload=payload,
                image_media_type=media,
            )
            pred = self._invoke(spec, self.transports[spec.agent_id], request)
            if pred is not None:
                out[spec.agent_id] = pred
        return out

    def _retrieval_votes(self, sample: Sample):
        if self.index is None:
            raise IndexUnavailable("re-evaluation required but no index configured")
        if self.query_embeddings is None or sample.image_id not in self.query_embeddings:
            raise ConfigError(f"no query embedding for sample {sample.image_id!r}")
        hits = knn_query(self.index, self.query_embeddings[sample.image_id], self.config.k)
        votes = weighted_vote(hits, self.config.label_set)
        return hits, tuple(votes)

    def _reeval_round(
        self, sample: Sample, initial: dict[str, AgentPrediction], votes, hits
    ) -> dict[str, AgentPrediction]:
        out: dict[str, AgentPrediction] = {}
        for spec in self.config.agents:
            prior = initial.get(spec.agent_id)
            if prior is None:
                continue  # absent agents are skipped, not re-prompted
            prompt = render_reeval_prompt(prior, list(votes), hits, self.config.label_set)
            payload, media = self._payload(spec, sample)
            request = AgentRequest(
                image_id=sample.image_id,
                prompt_text=prompt,
                stage=Stage.REEVAL,
                image_payload=payload,
                image_media_type=media,
            )
            pred = self._invoke(spec, self.transports[spec.agent_id], request)
            if pred is not None:
                out[spec.agent_id] = pred
        return out

    def _arbitrate(self, inp: ArbitrationInput, reeval_triggered: bool) -> FinalDecision:
        if self.orchestrator_transport is not None and self.config.orchestrator is not None:
            prompt = render_orchestrator_prompt(inp)
            request = AgentRequest(
                image_id=inp.image_id,
                prompt_text=prompt,
                stage=Stage.INITIAL,
                image_payload=None,  # the arbiter never sees pixels
            )
            parser = lambda text: parse_agent_reply(text, self.config.label_set, text_key="rationale")
            try:
                reply = invoke_with_retries(
                    self.config.orchestrator, request, parser, self.clock, self.orchestrator_transport
                )
                return FinalDecision(
                    image_id=inp.image_id,
                    category=reply.category,
                    confidence=reply.confidence,
                    rationale=reply.justification,
                    policy=self.config.policy,
                    reeval_triggered=reeval_triggered,
                    contributing=tuple(
                        (p.agent_id, p.stage)
                        for p in sorted(inp.predictions, key=lambda p: p.agent_id)
                    ),
                )
            except (FormatExhausted, AgentUnreachable) as exc:
                self.writer.log_agent_error(
                    self.config.orchestrator.agent_id, inp.image_id, Stage.INITIAL, str(exc), self.clock.now()
                )
        return rule_arbitrate(inp, self.config.tau, reeval_triggered)

    # -- policies ----------------------------------------------------------

    def run_sample(self, sample: Sample) -> tuple[FinalDecision | None, ReEvalTrace | None]:
        if self.config.policy is Policy.TRUST_AWARE_RAG:
            return self._run_trust_sample(sample)
        decision = self._run_confidence_sample(sample)
        return decision, None

    def _run_confidence_sample(self, sample: Sample) -> FinalDecision | None:
        initial = self._initial_round(sample)
        if not initial:
            self.writer.log_undecided(sample.image_id, "no agent produced a parsable reply", self.clock.now())
            return None
        inp = ArbitrationInput(
            image_id=sample.image_id,
            predictions=tuple(initial[a] for a in sorted(initial)),
            labels=self.config.label_set,
        )
        decision = self._arbitrate(inp, reeval_triggered=False)
        self.writer.log_decision(decision, self.clock.now())
        return decision

    def _run_trust_sample(self, sample: Sample) -> tuple[FinalDecision | None, ReEvalTrace]:
        initial = self._initial_round(sample)
        scores = {aid: trust_score(self.profiles[aid]) for aid in sorted(self.profiles)}
        triggered = should_reevaluate(scores, self.config.tau)
        votes: tuple[ClassVote, ...] = ()
        hits = []
        revised: dict[str, AgentPrediction] = {}
        if triggered:
            hits, votes = self._retrieval_votes(sample)
            revised = self._reeval_round(sample, initial, votes, hits)
        rounds = {
            aid: AgentRound(initial=pred, revised=revised.get(aid)) for aid, pred in initial.items()
        }
        trace = ReEvalTrace(
            image_id=sample.image_id,
            triggered=triggered,
            trust_scores=scores,
            tau_used=self.config.tau,
            votes=votes,
            rounds=rounds,
        )
        self.writer.log_trace(trace.to_record(), self.clock.now())
        latest = {aid: r.latest for aid, r in rounds.items()}
        if not latest:
            if votes:
                top = votes[0]
                decision = FinalDecision(
                    image_id=sample.image_id,
                    category=top.category,
                    confidence=top.confidence,
                    rationale="no agent produced a parsable reply; adopted the top retrieval vote",
                    policy=Policy.RULE_FALLBACK,
                    reeval_triggered=triggered,
                    contributing=(),
                )
                self.writer.log_decision(decision, self.clock.now())
                return decision, trace
            self.writer.log_undecided(
                sample.image_id, "no agent replies and no retrieval votes", self.clock.now()
            )
            return None, trace
        inp = ArbitrationInput(
            image_id=sample.image_id,
            predictions=tuple(latest[a] for a in sorted(latest)),
            labels=self.config.label_set,
            profiles=self.profiles,
            votes=votes if votes else None,
        )
        decision = self._arbitrate(inp, reeval_triggered=triggered)
        self.writer.log_decision(decision, self.clock.now())
        return decision, trace


def run_trust_pipeline(
    sample: Sample,
    profiles: Mapping[str, TrustProfile],
    index: VectorIndex,
    config: ExperimentConfig,
    clock: Clock,
    *,
    query_embeddings: Mapping,
    writer=None,
    transports: Mapping[str, object] | None = None,
) -> tuple[FinalDecision | None, ReEvalTrace]:
    """One-shot trust pipeline over a single sample (see PipelineRunner)."""
    runner = PipelineRunner(
        config,
        clock,
        writer,
        profiles=profiles,
        index=index,
        query_embeddings=query_embeddings,
        transports=transports,
    )
    decision, trace = runner._run_trust_sample(sample)
    return decision, trace


def run_experiment(
    config: ExperimentConfig,
    samples: Sequence[Sample],
    out_dir: str,
    clock: Clock,
    *,
    profiles: Mapping[str, TrustProfile] | None = None,
    index: VectorIndex | None = None,
    query_embeddings: Mapping | None = None,
    transports: Mapping[str, object] | None = None,
    orchestrator_transport=None,
) -> dict:
    """Execute the configured policy over all samples with idempotent resume.

    Already-settled image ids in the existing run log are skipped; every
    prediction, trace, and decision is persisted as it happens.
    """
    if not samples:
        raise ConfigError("no samples to run")
    if config.policy is Policy.TRUST_AWARE_RAG:
        if index is None:
            if not config.index_path:
                raise IndexUnavailable("trust_aware_rag policy requires index_path")
            index = load_index(config.index_path)
        if query_embeddings is None:
            if not config.query_embeddings_path:
                raise ConfigError("config key 'query_embeddings_path' is required for trust_aware_rag")
            query_embeddings = load_embedding_map(config.query_embeddings_path)
        missing = [s.image_id for s in samples if s.image_id not in query_embeddings]
        if missing:
            raise ConfigError(f"query embeddings missing for samples: {missing[:5]}")
    settled = settled_image_ids(out_dir)
    summary = {
        "decided": 0,
        "undecided": 0,
        "skipped": 0,
        "format_exhausted": 0,
        "agent_unreachable": 0,
    }
    with RunLogWriter(out_dir) as writer:
        runner = PipelineRunner(
            config,
            clock,
            writer,
            profiles=profiles,
            index=index,
            query_embeddings=query_embeddings,
            transports=transports,
            orchestrator_transport=orchestrator_transport,
        )
        for sample in samples:
            if sample.image_id in settled:
                summary["skipped"] += 1
                continue
            decision, _ = runner.run_sample(sample)
            if decision is None:
                summary["undecided"] += 1
            else:
                summary["decided"] += 1
        summary["format_exhausted"] = runner.counters["format_exhausted"]
        summary["agent_unreachable"] = runner.counters["agent_unreachable"]
    return summary


def trace_from_record(rec: dict) -> ReEvalTrace:
    """Rebuild a trace from its run-log record (predictions carry only the
    fields the analyses need)."""
    rounds = {}
    for aid, entry in rec.get("agents", {}).items():
        initial = AgentPrediction(
            agent_id=aid,
            image_id=rec["image_id"],
            stage=Stage.INITIAL,
            category=entry["initial"]["category"],
            confidence=float(entry["initial"]["confidence"]),
            justification="",
        )
        revised = None
        if entry.get("revised") is not None:
            revised = AgentPrediction(
                agent_id=aid,
                image_id=rec["image_id"],
                stage=Stage.REEVAL,
                category=entry["revised"]["category"],
                confidence=float(entry["revised"]["confidence"]),
                justification="",
            )
        rounds[aid] = AgentRound(initial=initial, revised=revised)
    return ReEvalTrace(
        image_id=rec["image_id"],
        triggered=bool(rec["triggered"]),
        trust_scores={k: float(v) for k, v in rec.get("trust_scores", {}).items()},
        tau_used=float(rec["tau_used"]),
        votes=tuple(
            ClassVote(category=v["category"], confidence=float(v["confidence"]))
            for v in rec.get("votes", ())
        ),
        rounds=rounds,
    )
