"""``hydrolink`` command line entry point."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .config import load_config, parse_config
from .errors import ConfigurationError, HydrolinkError, MissingArtifactError
from .fieldinterp import InterpMode

COMMANDS = ("precompute", "simulate", "estimate", "detect", "navigate", "report")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hydrolink", description="Bistatic underwater link simulator")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, type=Path, help="scenario JSON file")
    p.add_argument("--out", required=True, type=Path, help="artifact directory")
    p.add_argument("--link", help="restrict to one link, as SRC:RCV")
    p.add_argument("--mode", choices=[m.value for m in InterpMode], help="interpolation mode")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    return p


def _config(args):
    if args.seed is None:
        return load_config(args.config)
    if not args.config.exists():
        raise MissingArtifactError(f"config file not found: {args.config}")
    try:
        raw = json.loads(args.config.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON: {exc}", path=str(args.config)) from None
    raw["seed"] = args.seed
    return parse_config(raw)


def run(args) -> None:
    cfg = _config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    mode = InterpMode.parse(args.mode) if args.mode else None
    if args.command == "precompute":
        pipeline.precompute(cfg, out)
    elif args.command == "simulate":
        pipeline.simulate(cfg, out, args.link, mode)
    elif args.command == "estimate":
        pipeline.estimate(cfg, out, args.link)
    elif args.command == "detect":
        pipeline.detect(cfg, out, args.link)
    elif args.command == "navigate":
        pipeline.navigate(cfg, out, mode)
    else:
        pipeline.report(cfg, out, args.link)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except HydrolinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
