#!/usr/bin/env python3
"""Run a scenario repeatedly and confirm answers and per-topic counts never change."""
import argparse
import hashlib
import sys

from foa.scenario import load_scenario, run_scenario


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("scenario", nargs="?", default="smoke")
    parser.add_argument("--runs", type=int, default=5)
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args()
    scenario = load_scenario(args.scenario)
    seen = set()
    for i in range(args.runs):
        reports = run_scenario(scenario, seed=args.seed).reports
        key = tuple((r.job_id, r.answer, tuple(sorted(r.message_counts.items()))) for r in reports)
        seen.add(key)
        digest = hashlib.blake2b(repr(key).encode(), digest_size=8).hexdigest()
        print(f"run {i + 1}: {digest}")
    print("identical" if len(seen) == 1 else f"{len(seen)} distinct outcomes")
    return 0 if len(seen) == 1 else 1


if __name__ == "__main__":
    sys.exit(main())
