"""Command line: `splitfed simulate|grid|check`."""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import load_config, render_table, run_experiment
from .model import ConfigError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitfed", description="SplitFed simulator over noisy client links.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-client progress")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one configuration (or a sweep with --grid)")
    src = sim.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="run config (JSON)")
    src.add_argument("--grid", metavar="CONFIG", help="sweep config (JSON with a 'grid' section)")
    grid = sub.add_parser("grid", help="run the sigma x strategy sweep of a config")
    grid.add_argument("--config", required=True, help="sweep config (JSON)")
    for sp in (sim, grid):
        sp.add_argument("--seed", type=int, help="override the model, data and channel seeds")
        sp.add_argument("--out", help="output directory (overrides config and $SPLITFED_OUT)")
        sp.add_argument("--jobs", type=int, default=1, help="grid cells to run in parallel")

    chk = sub.add_parser("check", help="run the built-in oracle suites")
    chk.add_argument("--fast", action="store_true", help="skip the suites that train a model")
    return p


def _run(args, path: str, as_grid: bool) -> int:
    exp = load_config(path, seed=args.seed, out=args.out)
    if args.jobs < 1:
        raise ConfigError("--jobs: must be >= 1")
    summary = run_experiment(exp, jobs=args.jobs, grid=as_grid)
    sys.stdout.write(render_table(summary))
    print(f"outputs written to {exp.output_dir}")
    return EXIT_OK


def _check(args) -> int:
    from .checks import quick_suites, split_equivalence, full_model_gradient_check
    failed = 0
    for suite in quick_suites():
        if args.fast and suite in (split_equivalence, full_model_gradient_check):
            continue
        res = suite()
        print(res.line(), flush=True)
        failed += not res.passed
    return EXIT_OK if failed == 0 else EXIT_FAILED


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "check":
            return _check(args)
        if args.command == "grid":
            return _run(args, args.config, as_grid=True)
        if args.grid:
            return _run(args, args.grid, as_grid=True)
        return _run(args, args.config, as_grid=False)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
