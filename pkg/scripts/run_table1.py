"""Run the seven-sigma x three-strategy sweep and print the results table.

    python scripts/run_table1.py --jobs 4
    python scripts/run_table1.py --config configs/table1_grid.json --out runs/table1
"""

import argparse
import os
import sys
import time
from pathlib import Path

from splitfed.harness import load_config, render_table, run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "table1_grid.json"))
    ap.add_argument("--out", help="output directory (default: the config's output_dir)")
    ap.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    args = ap.parse_args()

    exp = load_config(args.config, out=args.out)
    t0 = time.perf_counter()
    summary = run_experiment(exp, jobs=args.jobs, grid=True)
    sys.stdout.write(render_table(summary))
    print(f"{len(summary['cells'])} cells in {time.perf_counter() - t0:.0f}s -> {exp.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
