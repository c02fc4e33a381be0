"""Command line: ``driftguard run|compare|sweep``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .harness import ExperimentConfig, format_table, load_config, run_experiment, timing_report


def _overrides(args) -> dict:
    changes, strategy = {}, {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.downsample:
        changes["downsample"] = True
    if args.strategy:
        strategy["kind"] = args.strategy
    if getattr(args, "memory_per_task", None):
        strategy["memory_per_task"] = args.memory_per_task
    if strategy:
        changes["strategy"] = strategy
    return changes


def _configs(args) -> list[ExperimentConfig]:
    paths = list(args.configs or [])
    if args.config:
        paths.insert(0, args.config)
    if not paths:
        raise SystemExit("no config given")
    return [load_config(p).replace(**_overrides(args)) for p in paths]


def _run_one(cfg: ExperimentConfig):
    return run_experiment(cfg)


def _out_dir(args, cfg: ExperimentConfig, name: str) -> str | None:
    base = args.out or cfg.out
    return str(Path(base) / name) if base else None


def cmd_run(args) -> int:
    cfg = _configs(args)[0]
    if args.out:
        cfg.out = args.out
    report = run_experiment(cfg)
    print(json.dumps(dict(report.metrics, total_seconds=report.total_seconds), indent=2))
    return 0


def _run_all(configs, jobs: int):
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_run_one, configs))
    return [_run_one(c) for c in configs]


def cmd_compare(args) -> int:
    configs = _configs(args)
    for k, cfg in enumerate(configs):
        cfg.out = _out_dir(args, cfg, f"{k:02d}_{cfg.strategy.kind}")
    reports = _run_all(configs, args.jobs)
    print(format_table(timing_report(reports)))
    return 0


def cmd_sweep(args) -> int:
    base = _configs(args)[0]
    sizes = [int(m) for m in args.memory.split(",") if m]
    configs = []
    for m in sizes:
        cfg = base.replace(strategy={"memory_per_task": m})
        cfg.out = _out_dir(args, cfg, f"memory_{m}")
        configs.append(cfg)
    reports = _run_all(configs, args.jobs)
    rows = [{"memory_per_task": m, "accuracy": r.metrics["accuracy"], "remembering": r.metrics["remembering"],
             "seconds": r.total_seconds} for m, r in zip(sizes, reports)]
    print(format_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftguard", description="Continual-learning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, many=False):
        p.add_argument("configs", nargs="*" if many else "?", help="YAML experiment config")
        p.add_argument("--config", help="config path (alternative to the positional argument)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--strategy", help="override strategy kind")
        p.add_argument("--memory-per-task", type=int, dest="memory_per_task")
        p.add_argument("--downsample", action="store_true", help="pool 28x28 images to 14x14")

    p = sub.add_parser("run", help="train over one task stream")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several configs and print a metric/timing table")
    common(p, many=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="vary the memory size per task")
    common(p)
    p.add_argument("--memory", default="10,50,100,200,300,500")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if isinstance(args.configs, str):
        args.configs = [args.configs]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
