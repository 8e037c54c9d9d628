"""Command-line entry point: ``mcpo <subcommand>``."""
from __future__ import annotations

import argparse
import glob
import json
import logging
import sys

from . import checks, harness
from .config import OUTPUT_ROOT_ENV, load_config
from .errors import CheckpointError, ConfigError


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seeds:
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    if args.output_dir:
        cfg.output_dir = args.output_dir
    root = harness.run(cfg, resume=args.resume, reuse=args.reuse)
    summary = json.loads((root / "summary.json").read_text())
    print(f"{cfg.name}: return {summary['return']} over {summary['n_ok']} seed(s), "
          f"{summary['n_failed']} failed -> {root}")
    return 0 if summary["n_failed"] == 0 else 1


def cmd_plot(args) -> int:
    paths = sorted(p for pattern in args.patterns for p in glob.glob(pattern, recursive=True))
    if not paths:
        print(f"no metrics files match {args.patterns}", file=sys.stderr)
        return 2
    svg, csv_path = harness.plot(paths, args.output, metric=args.metric)
    print(f"{len(paths)} run(s) -> {svg}, {csv_path}")
    return 0


def cmd_verify_bound(args) -> int:
    results = [checks.bound_suite(args.instances, seed=args.seed),
               checks.two_region_suite(args.instances, seed=args.seed + 1)]
    for r in results:
        print(r.line())
    return 0 if all(r.ok for r in results) else 1


def cmd_eval(args) -> int:
    res = harness.evaluate(args.checkpoint, args.episodes, seed=args.seed, greedy=not args.stochastic)
    print(json.dumps(res, indent=1))
    return 0


def cmd_selftest(args) -> int:
    results = checks.selftest(quick=args.quick)
    for r in results:
        print(r.line())
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcpo", description="Memory-constrained policy optimization toolkit.",
                                epilog=f"Run outputs go under ${OUTPUT_ROOT_ENV} (default ./runs) unless "
                                       "the config sets output_dir.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-iteration progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train every seed of a YAML config")
    t.add_argument("config")
    t.add_argument("--resume", action="store_true", help="continue from each seed's checkpoint")
    t.add_argument("--reuse", action="store_true",
                   help="skip seeds whose finished results match this config and the current code")
    t.add_argument("--seeds", help="comma-separated seed list overriding the config")
    t.add_argument("--output-dir", help="override the output root")
    t.set_defaults(fn=cmd_train)

    pl = sub.add_parser("plot", help="mean +- std curve over metrics.jsonl files")
    pl.add_argument("patterns", nargs="+", help="glob(s) matching metrics.jsonl files")
    pl.add_argument("-o", "--output", required=True, help="image path (.svg); a .csv is written alongside")
    pl.add_argument("--metric", default="episode_return")
    pl.set_defaults(fn=cmd_plot)

    vb = sub.add_parser("verify-bound", help="randomized check of the improvement bounds on tabular MDPs")
    vb.add_argument("--instances", type=int, default=1000)
    vb.add_argument("--seed", type=int, default=0)
    vb.set_defaults(fn=cmd_verify_bound)

    ev = sub.add_parser("eval", help="roll out a checkpointed policy")
    ev.add_argument("checkpoint")
    ev.add_argument("--episodes", type=int, default=10)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--stochastic", action="store_true", help="sample actions instead of taking the mode")
    ev.set_defaults(fn=cmd_eval)

    st = sub.add_parser("selftest", help="run the oracle property suites")
    st.add_argument("--quick", action="store_true", help="smaller instance counts")
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
