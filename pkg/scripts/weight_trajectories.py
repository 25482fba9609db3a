"""Per-epoch averaging weights of every client, from a run's metrics.csv.

Prints one plot-ready CSV block (global_epoch, r_1..r_N) per (sigma, strategy)
cell, e.g. to trace how the smart strategy sidelines clients once their links
turn noisy.

    python scripts/weight_trajectories.py runs/table1/metrics.csv --strategy smart --sigma 0.5
"""

import argparse
import csv
import sys
from collections import defaultdict


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("metrics", help="metrics.csv written by a run or sweep")
    ap.add_argument("--strategy", help="only this strategy")
    ap.add_argument("--sigma", type=float, help="only this noise level")
    args = ap.parse_args()

    table = defaultdict(lambda: defaultdict(dict))
    with open(args.metrics, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["client_id"] == "global":
                continue
            if args.strategy and row["strategy"] != args.strategy:
                continue
            if args.sigma is not None and float(row["sigma_noise"]) != args.sigma:
                continue
            cell = (float(row["sigma_noise"]), row["strategy"])
            table[cell][int(row["global_epoch"])][int(row["client_id"])] = row["r_weight"]

    out = csv.writer(sys.stdout, lineterminator="\n")
    for (sigma, strategy), epochs in table.items():
        clients = sorted({c for e in epochs.values() for c in e})
        print(f"# sigma={sigma!r} strategy={strategy}")
        out.writerow(["global_epoch"] + [f"r_{c}" for c in clients])
        for e in sorted(epochs):
            out.writerow([e] + [epochs[e].get(c, "") for c in clients])
    return 0


if __name__ == "__main__":
    sys.exit(main())
