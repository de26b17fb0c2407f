"""Command line entry points: ingest, build-index, query, profile-trust,
run, report, simulate.

Exit codes: 0 success, 2 usage/config error, 3 partial failure (some images
undecided), 4 fatal. Errors are emitted as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .core import (
    LabelSet,
    ManualClock,
    Policy,
    SystemClock,
    default_label_set,
    prediction_from_record,
    read_jsonl,
    read_truth,
)
from .dataset import ingest_dataset, load_manifest, save_manifest
from .evaluation import MissingLog, emit_report
from .orchestrator import IndexUnavailable, run_experiment
from .simulate import parse_synthetic_agent, run_simulation
from .trust import (
    TRUST_CSV_HEADER,
    ScoredOutcome,
    TrustProfile,
    build_trust_profile,
    trust_profile_csv_row,
)
from .vectorstore import (
    build_index,
    knn_query,
    load_index,
    ranked_votes_json,
    read_embedding_records,
    save_index,
    weighted_vote,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARTIAL = 3
EXIT_FATAL = 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # machine-readable usage errors on stderr
        raise _UsageError(message)


def _emit_error(kind: str, detail: str) -> None:
    print(json.dumps({"error": kind, "detail": detail}), file=sys.stderr)


def _labels_arg(raw: str | None) -> LabelSet:
    if not raw:
        return default_label_set()
    return LabelSet(tuple(part.strip() for part in raw.split(",")))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trustarb", description=__doc__)
    parser.add_argument("--version", action="version", version=f"trustarb {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="split a labeled image tree into a run manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", help="comma-separated canonical labels (default: built-in set)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("build-index", help="build an exact index from an embeddings dir")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("query", help="rank class votes for one query embedding")
    p.add_argument("--index", required=True)
    p.add_argument("--vector-file", required=True, help="JSON record with a 'vector' field")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--labels", help="comma-separated canonical labels for tie-breaks")

    p = sub.add_parser("profile-trust", help="compute trust profiles from a prediction log")
    p.add_argument("--log", required=True, help="prediction-log JSONL")
    p.add_argument("--truth", required=True, help="ground-truth JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--ece-bins", type=int, default=10)
    p.add_argument("--ocr-threshold", type=float, default=0.9)
    p.add_argument("--stage", choices=["initial", "reeval", "all"], default="all")

    p = sub.add_parser("run", help="execute a configured experiment over samples")
    p.add_argument("--config", required=True, help="TOML or JSON experiment config")
    p.add_argument("--samples", required=True, help="manifest.json (or its directory)")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--policy", choices=["confidence", "trust-rag"])
    p.add_argument("--out", required=True)
    p.add_argument("--fixed-clock", action="store_true", help="deterministic manual clock")

    p = sub.add_parser("report", help="materialize the report bundle from a run dir")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.add_argument("--labels")

    p = sub.add_parser("simulate", help="synthetic end-to-end run of both policies")
    p.add_argument("--agents", nargs="+", required=True, metavar="NAME:ACC[@CONF]")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--tau", type=float, default=0.7)
    return parser


_POLICY_FLAGS = {"confidence": Policy.CONFIDENCE_AWARE, "trust-rag": Policy.TRUST_AWARE_RAG}


def _cmd_ingest(args) -> int:
    labels = _labels_arg(args.labels)
    manifest = ingest_dataset(args.root, labels, args.seed, SystemClock())
    path = save_manifest(manifest, args.out)
    print(json.dumps({"manifest": path, "samples": len(manifest.samples)}))
    return EXIT_OK


def _cmd_build_index(args) -> int:
    _, records = read_embedding_records(args.embeddings)
    index = build_index(records)
    save_index(index, args.out)
    print(json.dumps(index.manifest))
    return EXIT_OK


def _cmd_query(args) -> int:
    index = load_index(args.index)
    with open(args.vector_file, encoding="utf-8") as fh:
        record = json.load(fh)
    hits = knn_query(index, np.asarray(record["vector"], dtype=np.float64), args.k)
    votes = weighted_vote(hits, _labels_arg(args.labels) if args.labels else None)
    print(ranked_votes_json(votes))
    return EXIT_OK


def _cmd_profile_trust(args) -> int:
    import os

    truth = read_truth(args.truth)
    outcomes_by_agent: dict[str, list[ScoredOutcome]] = {}
    for rec in read_jsonl(args.log):
        pred, _ = prediction_from_record(rec)
        if args.stage != "all" and pred.stage.value != args.stage:
            continue
        if pred.image_id not in truth:
            continue
        outcomes_by_agent.setdefault(pred.agent_id, []).append(
            ScoredOutcome(pred.confidence, pred.category == truth[pred.image_id])
        )
    if not outcomes_by_agent:
        raise ConfigError("prediction log shares no image ids with the truth file")
    os.makedirs(args.out, exist_ok=True)
    profiles: list[TrustProfile] = []
    for agent_id in sorted(outcomes_by_agent):
        profile = build_trust_profile(
            agent_id,
            outcomes_by_agent[agent_id],
            ece_bins=args.ece_bins,
            ocr_threshold=args.ocr_threshold,
        )
        profiles.append(profile)
        with open(
            os.path.join(args.out, f"trust_profile_{agent_id}.json"), "w", encoding="utf-8", newline="\n"
        ) as fh:
            json.dump(profile.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    csv_path = os.path.join(args.out, "trust_profiles.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRUST_CSV_HEADER + "\n")
        for profile in profiles:
            fh.write(trust_profile_csv_row(profile) + "\n")
    print(json.dumps({"agents": [p.agent_id for p in profiles], "csv": csv_path}))
    return EXIT_OK


def _load_profiles(path: str | None) -> dict[str, TrustProfile] | None:
    import glob
    import os

    if not path:
        return None
    profiles = {}
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "trust_profile_*.json")))
    else:
        files = [path]
    for fname in files:
        with open(fname, encoding="utf-8") as fh:
            profile = TrustProfile.from_json_dict(json.load(fh))
        profiles[profile.agent_id] = profile
    return profiles or None


def _cmd_run(args) -> int:
    import os

    policy = _POLICY_FLAGS.get(args.policy) if args.policy else None
    config = load_config(args.config, policy=policy)
    manifest = load_manifest(args.samples)
    samples = manifest.samples_for(None if args.split == "all" else args.split)
    clock = ManualClock(0.0) if args.fixed_clock else SystemClock()
    profiles = None
    if config.policy is Policy.TRUST_AWARE_RAG:
        if not config.profiles_path:
            raise ConfigError("config key 'profiles_path' is required for trust_aware_rag")
        if not os.path.exists(config.profiles_path):
            raise ConfigError(f"config key 'profiles_path' points at a missing path: {config.profiles_path!r}")
        profiles = _load_profiles(config.profiles_path)
    elif config.profiles_path and os.path.exists(config.profiles_path):
        profiles = _load_profiles(config.profiles_path)

    os.makedirs(args.out, exist_ok=True)
    config_path = os.path.join(args.out, "config.json")
    if not os.path.exists(config_path):
        with open(config_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(config.snapshot(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    labeled = {s.image_id: s.true_label for s in samples if s.true_label}
    if labeled:
        from .core import write_truth

        write_truth(os.path.join(args.out, "truth.jsonl"), labeled)
    summary = run_experiment(config, samples, args.out, clock, profiles=profiles)
    print(json.dumps(summary))
    return EXIT_PARTIAL if summary["undecided"] else EXIT_OK


def _cmd_report(args) -> int:
    import os

    run_dir = args.run
    manifest = load_manifest(run_dir) if os.path.exists(os.path.join(run_dir, "manifest.json")) else None
    if manifest is not None:
        truth = manifest.truth()
        labels = LabelSet(manifest.labels)
    else:
        # fall back to a truth file next to the log
        truth_path = os.path.join(run_dir, "truth.jsonl")
        if not os.path.exists(truth_path):
            raise MissingLog(f"no manifest.json or truth.jsonl under {run_dir!r}")
        truth = read_truth(truth_path)
        labels = _labels_arg(args.labels)
    metrics = emit_report(run_dir, truth, labels, args.out)
    print(json.dumps({"n": metrics["n"], "out": args.out or os.path.join(run_dir, "report")}))
    return EXIT_OK


def _cmd_simulate(args) -> int:
    agents = [parse_synthetic_agent(a) for a in args.agents]
    summary = run_simulation(args.out, agents, args.n, args.seed, k=args.k, tau=args.tau)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


_COMMANDS = {
    "ingest": _cmd_ingest,
    "build-index": _cmd_build_index,
    "query": _cmd_query,
    "profile-trust": _cmd_profile_trust,
    "run": _cmd_run,
    "report": _cmd_report,
    "simulate": _cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    except ConfigError as exc:
        _emit_error("config", str(exc))
        return EXIT_USAGE
    except (MissingLog, FileNotFoundError) as exc:
        _emit_error("missing_input", str(exc))
        return EXIT_FATAL
    except IndexUnavailable as exc:
        _emit_error("index_unavailable", str(exc))
        return EXIT_FATAL
    except Exception as exc:  # keep the contract: JSON on stderr, nonzero exit
        _emit_error(type(exc).__name__, str(exc))
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
