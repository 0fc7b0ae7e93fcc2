"""Command-line entry point: ``opendg run|report|gradcheck|demo``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

from . import runner
from .errors import OpenDGError
from .train import parse_method


def _apply_overrides(cfg: runner.ExperimentConfig, args: argparse.Namespace) -> runner.ExperimentConfig:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.trials is not None:
        changes["trials"] = args.trials
    if args.methods:
        methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
        for m in methods:
            parse_method(m)
        changes["methods"] = methods
    if args.delta is not None:
        changes["delta"] = args.delta
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.parallel is not None:
        changes["parallel"] = args.parallel
    if args.verbose:
        changes["train"] = dataclasses.replace(cfg.train, verbose=True)
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _run(cfg: runner.ExperimentConfig) -> int:
    t0 = time.perf_counter()
    records = runner.run_experiment(cfg)
    print(runner.report(records))
    print()
    for method, secs in runner.time_epochs(records).items():
        print(f"{method:<12s} {secs:.5f} s/epoch")
    print(f"\n{len(records)} records written to {cfg.out_dir} in {time.perf_counter() - t0:.1f}s")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    return _run(_apply_overrides(runner.load_config(args.config), args))


def cmd_demo(args: argparse.Namespace) -> int:
    return _run(_apply_overrides(runner.demo_config(), args))


def cmd_report(args: argparse.Namespace) -> int:
    directory = Path(args.dir)
    records = runner.read_results(directory / "results.csv")
    print(runner.report(records, directory))
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from .gradsuite import run_suite

    results = run_suite(seed=args.seed or 0, instances=args.instances)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status}  {r.name:<14s} instance {r.instance}  max rel err {r.max_rel_err:.2e}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base seed")
    common.add_argument("--trials", type=int, default=None)
    common.add_argument("--methods", default=None, help="comma-separated method names")
    common.add_argument("--delta", type=float, default=None, help="fixed unknown threshold instead of calibration")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--parallel", type=int, default=None, help="worker processes for experiment cells")
    common.add_argument("--verbose", action="store_true", help="per-epoch JSON lines on stderr")

    p = argparse.ArgumentParser(prog="opendg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run an experiment from a YAML config")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)
    d = sub.add_parser("demo", parents=[common], help="quick pacs_like run")
    d.set_defaults(func=cmd_demo)
    rep = sub.add_parser("report", help="rebuild summary.csv and the table from results.csv")
    rep.add_argument("dir")
    rep.set_defaults(func=cmd_report)
    g = sub.add_parser("gradcheck", help="finite-difference checks of every loss")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instances", type=int, default=5)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OpenDGError, OSError) as exc:
        print(f"opendg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
