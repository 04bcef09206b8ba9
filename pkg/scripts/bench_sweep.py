#!/usr/bin/env python3
"""Print counter sweeps for every bench mode, optionally as CSV."""
import argparse
import csv
import sys

from foa.bench import BENCH_MODES, bench, format_table

DEFAULT_SIZES = {"routing": [4, 8, 16, 32, 64], "clustering": [4, 8, 16, 32], "consensus": [2, 3, 4, 5]}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--csv", action="store_true", help="write CSV to stdout instead of tables")
    args = parser.parse_args()
    for mode in BENCH_MODES:
        rows = bench(mode, DEFAULT_SIZES[mode], args.seed)
        if args.csv:
            writer = csv.DictWriter(sys.stdout, fieldnames=["mode", *rows[0]])
            writer.writeheader()
            writer.writerows({"mode": mode, **r} for r in rows)
        else:
            print(f"## {mode}")
            print(format_table(rows))
            print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
