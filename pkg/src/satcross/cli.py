"""Command-line entry point.

Commands: gen-data, pretrain, adapt, eval, ablate, analyze-tags. Every run
resolves its configuration (defaults < config file < flags), writes a
config snapshot next to its artifacts, and is bit-reproducible from that
snapshot.
"""

from __future__ import annotations

import argparse
import json
import sys

import torch

from .config import RunConfig, load_config, save_snapshot
from .errors import ConfigError, SatcrossError
from .pipeline import (
    run_ablate,
    run_adapt,
    run_analyze_tags,
    run_eval,
    run_gen_data,
    run_pretrain,
)

COMMANDS = ("gen-data", "pretrain", "adapt", "eval", "ablate", "analyze-tags")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="satcross",
        description="Cross-domain satellite image-text retrieval pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="JSON config file or run snapshot")
        cmd.add_argument("--seed", type=int, help="global seed override")
        cmd.add_argument("--out", help="output directory override")
        if name in ("adapt", "ablate"):
            cmd.add_argument("--no-ss", action="store_true",
                             help="disable similarity-based source sampling")
            cmd.add_argument("--no-cl", action="store_true",
                             help="disable the curriculum window")
            cmd.add_argument("--no-at", action="store_true",
                             help="disable adversarial training")
            cmd.add_argument("--mode", choices=("window", "cumulative"),
                             help="curriculum window mode")
        if name in ("eval", "analyze-tags"):
            cmd.add_argument("--manifest", help="manifest to evaluate/analyze")
        if name == "eval":
            cmd.add_argument("--checkpoint", help="checkpoint to evaluate")
    return parser


def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    if getattr(args, "no_ss", False):
        config.toggles.ss = False
    if getattr(args, "no_cl", False):
        config.toggles.cl = False
    if getattr(args, "no_at", False):
        config.toggles.at = False
    if getattr(args, "mode", None):
        config.curriculum.mode = args.mode
    return config


def main(argv=None) -> int:
    torch.set_num_threads(1)  # fixed reduction order keeps replays bit-exact
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        config.resolve_seeds()
        out_dir = config.out_dir
        if args.command == "gen-data":
            result = run_gen_data(config, out_dir)
        elif args.command == "pretrain":
            result = run_pretrain(config, out_dir)
        elif args.command == "adapt":
            result = run_adapt(config, out_dir)
        elif args.command == "eval":
            result = run_eval(config, out_dir,
                              checkpoint=getattr(args, "checkpoint", None),
                              manifest=getattr(args, "manifest", None))
        elif args.command == "ablate":
            result = run_ablate(config, out_dir)
        elif args.command == "analyze-tags":
            result = run_analyze_tags(config, out_dir,
                                      manifest=getattr(args, "manifest", None))
        else:  # argparse guards this; kept for programmatic calls
            raise ConfigError("command", f"unknown command '{args.command}'")
        save_snapshot(config, args.command,
                      f"{out_dir}/config_snapshot.json")
    except SatcrossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    summary = {k: v for k, v in result.items() if not isinstance(v, dict)}
    if "report" in result and isinstance(result["report"], dict):
        brief = {k: result["report"][k] for k in ("mean_recall", "delta_mean_recall")
                 if k in result["report"]}
        summary.update(brief)
    print(json.dumps({"command": args.command, "out_dir": out_dir, **summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
