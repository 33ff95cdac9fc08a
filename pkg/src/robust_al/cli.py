"""Command-line entry points: run experiments, generate data, re-report.

The ROBUST_AL_OUT environment variable overrides the output directory for
commands that write files; explicit --out flags win over both it and the
config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .data import SyntheticParams, generate_synthetic, read_cifar_binary

OUT_ENV_VAR = "ROBUST_AL_OUT"


def _resolve_out(cli_value, config_value=None):
    if cli_value:
        return cli_value
    env = os.environ.get(OUT_ENV_VAR)
    if env:
        return env
    return config_value


def cmd_run(args) -> int:
    config = harness.config_from_file(args.config)
    overrides = {}
    if args.seeds is not None:
        overrides["n_seeds"] = args.seeds
    if args.arm:
        overrides["arms"] = harness.ARMS if args.arm == "both" else (args.arm,)
    if args.attack:
        overrides["attack"] = args.attack
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.trace:
        overrides["trace"] = True
    out_dir = _resolve_out(args.out, config.out_dir)
    if out_dir:
        overrides["out_dir"] = out_dir
    if overrides:
        config = dataclasses.replace(config, **overrides)

    if config.attack == "poison":
        report = harness.run_poison_campaign(config)
        written = harness.emit_campaign_reports(report, config.out_dir)
        for arm, summary in report.per_arm.items():
            print(f"{arm}: verified successes "
                  f"{summary['verified_successes']}/{summary['targets']}, "
                  f"mean clean accuracy {summary['mean_clean_accuracy']:.4f} "
                  f"(no attack: {summary['no_attack_accuracy']:.4f})")
    else:
        report = harness.run_experiment(config)
        written = harness.emit_reports(report, config.out_dir,
                                       traces=config.trace)
        print(f"clean reference {report.clean_reference:.4f}, "
              f"target {report.target_accuracy:.4f}")
        for arm, stats in report.stats.items():
            if stats:
                print(f"{arm}: budget mean {stats['mean']:.1f} "
                      f"sd {stats['std']:.1f} "
                      f"(min {stats['min']:.0f}, max {stats['max']:.0f}), "
                      f"missed target {report.failures[arm]}x")
    for path in written:
        print(f"wrote {path}")
    if report.errors:
        for err in report.errors:
            print(f"cell failed: {err}", file=sys.stderr)
        return 1
    return 0


def cmd_gen_data(args) -> int:
    out = _resolve_out(args.out) or "dataset.npz"
    if args.cifar:
        classes = tuple(int(c) for c in args.classes.split(","))
        instances = read_cifar_binary(args.cifar, classes, args.cap)
        x = np.stack([inst.x for inst in instances]) if instances else np.zeros((0, 3072))
        y = np.array([inst.true_label for inst in instances], dtype=np.int64)
        ids = np.array([inst.id for inst in instances], dtype=np.int64)
        np.savez(out, x=x, y=y, ids=ids)
        print(f"wrote {out} ({len(instances)} instances, classes {classes})")
        return 0
    params = SyntheticParams()
    pool, reserve, test = generate_synthetic(params, seed=args.seed)
    arrays = {}
    for name, split in (("pool", pool), ("reserve", reserve), ("test", test)):
        arrays[f"{name}_x"] = np.stack([i.x for i in split])
        arrays[f"{name}_y"] = np.array([i.true_label for i in split])
        arrays[f"{name}_ids"] = np.array([i.id for i in split])
    np.savez(out, **arrays)
    print(f"wrote {out} (pool {len(pool)}, reserve {len(reserve)}, test {len(test)})")
    return 0


def cmd_report(args) -> int:
    formats = tuple(args.format.split(","))
    written = harness.report_from_directory(args.in_dir, formats)
    for path in written:
        print(f"wrote {path}")
    summary = json.loads((Path(args.in_dir) / "report.json").read_text()) \
        if "json" in formats else None
    if summary:
        for arm, stats in summary["stats"].items():
            print(f"{arm}: budget mean {stats['mean']:.1f} sd {stats['std']:.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robust-al",
        description="Active-learning simulator with labeler-attack defenses")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a seeded experiment from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seeds", type=int, default=None)
    p_run.add_argument("--arm", choices=("proposed", "baseline", "both"))
    p_run.add_argument("--attack", choices=("none", "mislabel", "poison"))
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--jobs", type=int, default=None)
    p_run.add_argument("--trace", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_gen = sub.add_parser("gen-data", help="materialize a dataset to an npz file")
    group = p_gen.add_mutually_exclusive_group(required=True)
    group.add_argument("--synthetic", action="store_true")
    group.add_argument("--cifar", metavar="PATH")
    p_gen.add_argument("--classes", default="0,6")
    p_gen.add_argument("--cap", type=int, default=3000)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", default=None)
    p_gen.set_defaults(func=cmd_gen_data)

    p_rep = sub.add_parser("report", help="recompute statistics from rows.csv")
    p_rep.add_argument("--in", dest="in_dir", required=True)
    p_rep.add_argument("--format", default="csv,json")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
