"""Command-line entry point: ``faig <subcommand> --config PATH``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config
from .pipeline import Pipeline, PipelineError

COMMANDS = {
    "prepare-data": "prepare_data",
    "train-baseline": "train_baseline",
    "finetune-target": "finetune_target",
    "attribute": "attribute",
    "mask-eval": "mask_eval",
    "sweep": "sweep",
    "retrain-eval": "retrain_eval",
    "predict": "predict",
    "plot": "plot",
    "reproduce-all": "reproduce_all",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faig", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config file (INI sections)")
        p.add_argument("--seed", type=int, action="append",
                       help="run only this seed (repeatable); default: all configured seeds")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--device", choices=("cpu", "accelerator"), default="cpu")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.device == "accelerator":
        print("error: accelerator execution is not supported by this build; use --device cpu",
              file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, args.override)
        pipeline = Pipeline(cfg, seeds=args.seed)
        result = getattr(pipeline, COMMANDS[args.command])()
        if args.command in ("mask-eval", "sweep", "retrain-eval", "predict"):
            pipeline.write_config()
        if args.command == "reproduce-all":
            print(json.dumps(_verdicts(result), indent=2))
    except (PipelineError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def _verdicts(result: dict) -> dict:
    return {k: v.get("passed") for k, v in result.items() if isinstance(v, dict) and "passed" in v}


if __name__ == "__main__":
    sys.exit(main())
