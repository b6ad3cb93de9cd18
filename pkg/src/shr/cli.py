"""Command line entry point: ``shr synth|train|tune-lambdas|eval|register``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .config import RunConfig
from .errors import SHRError


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="shr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate scene bundles and the reference database")
    sub.add_parser("train", parents=[common], help="fit visibility, train policies, tune lambdas")
    sub.add_parser("tune-lambdas", parents=[common], help="re-tune score weights on validation scenes")
    sub.add_parser("eval", parents=[common], help="evaluate all methods on the test split")
    reg = sub.add_parser("register", parents=[common], help="register a single scene bundle")
    reg.add_argument("scene", help="scene bundle directory")
    reg.add_argument("--dest", help="where to write pose.json and overlay.json")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "synth":
            print(harness.cmd_synth(cfg))
        elif args.command == "train":
            print(json.dumps(harness.cmd_train(cfg)))
        elif args.command == "tune-lambdas":
            print(json.dumps({"lambdas": list(harness.cmd_tune_lambdas(cfg).as_tuple())}))
        elif args.command == "eval":
            for row in harness.cmd_eval(cfg).rows:
                print(f"{row['method']:<16} {row['occlusion']:.2f}  median {row['median']:.4f}"
                      f"  n {row['n']}  failures {row['failures']}")
        elif args.command == "register":
            res = harness.cmd_register(cfg, args.scene, args.dest)
            print(json.dumps(res["pose"]))
    except (SHRError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
