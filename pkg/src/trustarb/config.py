"""Declarative experiment configuration; the config file is a logged artifact,
only secrets come from the environment."""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass

from .core import LabelSet, Policy, default_label_set
from .gateway import AgentSpec

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    label_set: LabelSet
    agents: tuple[AgentSpec, ...]
    seed: int
    orchestrator: AgentSpec | None = None  # None = deterministic rule fallback
    policy: Policy = Policy.CONFIDENCE_AWARE
    k: int = 5
    tau: float = 0.7
    ocr_threshold: float = 0.9
    ece_bins: int = 10
    retry_cap: int = 3
    index_path: str | None = None
    query_embeddings_path: str | None = None
    profiles_path: str | None = None

    def __post_init__(self) -> None:
        if not self.agents:
            raise ConfigError("config key 'agents' must list at least one agent")
        if self.k < 1:
            raise ConfigError("config key 'k' must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("config key 'tau' must lie in [0, 1]")
        if not 0.0 < self.ocr_threshold < 1.0:
            raise ConfigError("config key 'ocr_threshold' must lie strictly in (0, 1)")
        if self.ece_bins < 1:
            raise ConfigError("config key 'ece_bins' must be >= 1")
        if self.retry_cap < 0:
            raise ConfigError("config key 'retry_cap' must be >= 0")

    def snapshot(self) -> dict:
        """JSON-ready snapshot persisted into every run directory."""
        return {
            "label_set": list(self.label_set),
            "agents": [_agent_to_dict(a) for a in self.agents],
            "orchestrator": _agent_to_dict(self.orchestrator) if self.orchestrator else "rule_fallback",
            "policy": self.policy.value,
            "k": self.k,
            "tau": self.tau,
            "ocr_threshold": self.ocr_threshold,
            "ece_bins": self.ece_bins,
            "retry_cap": self.retry_cap,
            "seed": self.seed,
            "index_path": self.index_path,
            "query_embeddings_path": self.query_embeddings_path,
            "profiles_path": self.profiles_path,
        }


def _agent_to_dict(spec: AgentSpec) -> dict:
    return {
        "agent_id": spec.agent_id,
        "kind": spec.kind,
        "endpoint_url": spec.endpoint_url,
        "api_key_env": spec.api_key_env,
        "model_name": spec.model_name,
        "script_path": spec.script_path,
        "timeout_ms": spec.timeout_ms,
        "retry_cap": spec.retry_cap,
    }


def _agent_from_dict(data: dict, retry_cap: int) -> AgentSpec:
    if "agent_id" not in data:
        raise ConfigError("config key 'agents[].agent_id' is required")
    if "kind" not in data:
        raise ConfigError(f"config key 'agents[].kind' is required (agent {data['agent_id']!r})")
    try:
        return AgentSpec(
            agent_id=data["agent_id"],
            kind=data["kind"],
            endpoint_url=data.get("endpoint_url"),
            api_key_env=data.get("api_key_env"),
            model_name=data.get("model_name"),
            script_path=data.get("script_path"),
            timeout_ms=float(data.get("timeout_ms", 60_000.0)),
            retry_cap=int(data.get("retry_cap", retry_cap)),
            requests_per_minute=data.get("requests_per_minute"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(data: dict, **overrides) -> ExperimentConfig:
    merged = dict(data)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for required in ("agents", "seed"):
        if required not in merged:
            raise ConfigError(f"config key {required!r} is required")
    labels = LabelSet(tuple(merged.get("label_set", default_label_set().labels)))
    retry_cap = int(merged.get("retry_cap", 3))
    agents = tuple(_agent_from_dict(a, retry_cap) for a in merged["agents"])
    orch_raw = merged.get("orchestrator")
    orchestrator = None
    if orch_raw not in (None, "rule_fallback"):
        orchestrator = _agent_from_dict(orch_raw, retry_cap)
    policy_raw = merged.get("policy", Policy.CONFIDENCE_AWARE)
    try:
        policy = policy_raw if isinstance(policy_raw, Policy) else Policy(policy_raw)
    except ValueError as exc:
        raise ConfigError(f"config key 'policy' has unknown value {policy_raw!r}") from exc
    return ExperimentConfig(
        label_set=labels,
        agents=agents,
        seed=int(merged["seed"]),
        orchestrator=orchestrator,
        policy=policy,
        k=int(merged.get("k", 5)),
        tau=float(merged.get("tau", 0.7)),
        ocr_threshold=float(merged.get("ocr_threshold", 0.9)),
        ece_bins=int(merged.get("ece_bins", 10)),
        retry_cap=retry_cap,
        index_path=merged.get("index_path"),
        query_embeddings_path=merged.get("query_embeddings_path"),
        profiles_path=merged.get("profiles_path"),
    )


def load_config(path: str, **overrides) -> ExperimentConfig:
    """Load a TOML or JSON config file (picked by extension).

    Relative paths inside the file resolve against the file's directory, so
    logged config snapshots replay from anywhere.
    """
    if str(path).endswith(".toml"):
        with open(path, "rb") as fh:
            data = _toml.load(fh)
    else:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        if p and not os.path.isabs(p):
            return os.path.normpath(os.path.join(base, p))
        return p

    for key in ("index_path", "query_embeddings_path", "profiles_path"):
        if isinstance(data.get(key), str):
            data[key] = resolve(data[key])
    agent_lists = [data.get("agents", [])]
    if isinstance(data.get("orchestrator"), dict):
        agent_lists.append([data["orchestrator"]])
    for agents in agent_lists:
        for agent in agents:
            if isinstance(agent, dict) and isinstance(agent.get("script_path"), str):
                agent["script_path"] = resolve(agent["script_path"])
    return config_from_dict(data, **overrides)
