#!/usr/bin/env python3
"""Sweep the two orchestration policies over several seeds and print a table.

Example:
    python scripts/policy_sweep.py --seeds 5 --n 400 --out /tmp/sweep
"""

import argparse
import tempfile

from trustarb.simulate import parse_synthetic_agent, run_simulation


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--n", type=int, default=400)
    parser.add_argument(
        "--agents", nargs="+", default=["calibrated:0.9", "overconfident:0.5@0.95"]
    )
    parser.add_argument("--out", default=None, help="directory for run artifacts")
    args = parser.parse_args()

    agents = [parse_synthetic_agent(a) for a in args.agents]
    out_root = args.out or tempfile.mkdtemp(prefix="policy_sweep_")
    print(f"writing runs under {out_root}")
    print(f"{'seed':>4}  {'conf-argmax':>11}  {'trust-rag':>9}  {'best agent':>10}  {'votes':>6}")
    rows = []
    for seed in range(args.seeds):
        summary = run_simulation(f"{out_root}/seed{seed}", agents, args.n, seed)
        conf = summary["policies"]["confidence_aware"]["accuracy"]
        trust = summary["policies"]["trust_aware_rag"]["accuracy"]
        best = max(a["test_initial_accuracy"] for a in summary["agents"].values())
        votes = summary["vote_top1_accuracy"]
        rows.append((conf, trust, best))
        print(f"{seed:>4}  {conf:>11.4f}  {trust:>9.4f}  {best:>10.4f}  {votes:>6.4f}")
    mean = lambda xs: sum(xs) / len(xs)
    print(
        f"{'mean':>4}  {mean([r[0] for r in rows]):>11.4f}  "
        f"{mean([r[1] for r in rows]):>9.4f}  {mean([r[2] for r in rows]):>10.4f}"
    )


if __name__ == "__main__":
    main()
