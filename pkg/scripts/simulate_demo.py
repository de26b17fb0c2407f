#!/usr/bin/env python3
"""One full simulated experiment: both policies, report bundles, summary.

Example:
    python scripts/simulate_demo.py --out /tmp/demo --seed 7
"""

import argparse
import json

from trustarb.simulate import parse_synthetic_agent, run_simulation


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--n", type=int, default=400)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument(
        "--agents", nargs="+", default=["calibrated:0.9", "overconfident:0.5@0.95"]
    )
    args = parser.parse_args()

    agents = [parse_synthetic_agent(a) for a in args.agents]
    summary = run_simulation(args.out, agents, args.n, args.seed)
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"\nreport bundles:\n  {args.out}/confidence/report\n  {args.out}/trust/report")


if __name__ == "__main__":
    main()
