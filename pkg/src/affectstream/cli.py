"""``affectstream`` command line: one verb per pipeline stage, all artifacts under ``--out``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, make_config
from .dataset import DatasetError
from .pipeline import (
    HygieneError,
    Run,
    StageError,
    cmd_eval,
    cmd_flow,
    cmd_keyframes,
    cmd_preprocess,
    cmd_report,
    cmd_synth,
    cmd_train,
    dump_filters,
    run_all,
)

VERBS = ("synth", "preprocess", "keyframes", "flow", "train", "eval", "report", "run-all", "dump-filters")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--config", help="TOML or JSON config file")
    common.add_argument("--preset", default="desk", choices=("desk", "paper"),
                        help="base settings before --config and --set (default: desk)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. --set optim.epochs=10 (repeatable)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--force", action="store_true", help="recompute even if outputs are up to date")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="affectstream", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb, parents=[common])
        if verb == "train":
            p.add_argument("--stop-after", type=int, metavar="EPOCHS",
                           help="stop after this many epochs; rerun to resume")
        if verb in ("eval", "dump-filters"):
            p.add_argument("--checkpoint", help="model checkpoint (default: <out>/model/best.pt)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(args.preset, args.config, args.overrides, args.seed)
        run = Run(cfg, args.out, force=args.force)
        if args.verb == "synth":
            cmd_synth(run)
        elif args.verb == "preprocess":
            cmd_preprocess(run)
        elif args.verb == "keyframes":
            cmd_keyframes(run)
        elif args.verb == "flow":
            cmd_flow(run)
        elif args.verb == "train":
            cmd_train(run, stop_after=args.stop_after)
        elif args.verb == "eval":
            cmd_eval(run, args.checkpoint)
        elif args.verb == "report":
            cmd_report(run)
        elif args.verb == "run-all":
            run_all(run)
        elif args.verb == "dump-filters":
            dump_filters(run, args.checkpoint)
    except (ConfigError, DatasetError, StageError, HygieneError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
