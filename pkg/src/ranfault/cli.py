"""Command-line entry point.

Every command takes a JSON experiment config and an output directory; --seed
rederives all section seeds from one master value so sweeps need only one
flag.  Exit codes: 0 success, 2 configuration error, 3 training divergence.
Set RANFAULT_LOG_LEVEL (DEBUG/INFO/WARNING/...) to control logging; it has
no effect on results or artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import experiment
from .experiment import ConfigError
from .model import DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="path to experiment config JSON")
    sub.add_argument("--seed", type=int, default=None,
                     help="master seed override (rederives all section seeds)")
    sub.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ranfault",
        description="Synthetic cellular-counter panels, graph-recurrent forecasting, "
                    "residual anomaly detection, and federated training simulation.")
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("generate", help="write panel.csv / labels.csv / sw_graph.json")
    _add_common(sub)

    sub = subs.add_parser("train-central",
                          help="centralized training, detection, and metrics")
    _add_common(sub)
    sub.add_argument("--edges", choices=("graph", "none"), default="graph",
                     help="'none' drops all signal-graph edges (disconnected baseline)")

    sub = subs.add_parser("train-fed",
                          help="federated strategies scored against the central run")
    _add_common(sub)

    sub = subs.add_parser("detect", help="run detection with a saved checkpoint")
    _add_common(sub)
    sub.add_argument("--checkpoint", required=True, help="checkpoint.bin path")

    sub = subs.add_parser("evaluate", help="score predicted labels against truth labels")
    sub.add_argument("--pred", required=True, help="predicted labels CSV")
    sub.add_argument("--truth", required=True, help="truth labels CSV")
    sub.add_argument("--out", required=True, help="output directory")

    sub = subs.add_parser("report", help="merge metrics artifacts in a directory")
    sub.add_argument("--out", required=True, help="directory holding run artifacts")
    return parser


def _dispatch(args: argparse.Namespace) -> dict:
    if args.command == "evaluate":
        return experiment.run_evaluate(args.pred, args.truth, args.out)
    if args.command == "report":
        return experiment.run_report(args.out)
    cfg = experiment.load_config(args.config, seed_override=args.seed)
    if args.command == "generate":
        return experiment.run_generate(cfg, args.out)
    if args.command == "train-central":
        return experiment.run_train_central(cfg, args.out, edges_mode=args.edges)
    if args.command == "train-fed":
        return experiment.run_train_fed(cfg, args.out)
    if args.command == "detect":
        return experiment.run_detect(cfg, args.out, args.checkpoint)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("RANFAULT_LOG_LEVEL", "WARNING"),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
