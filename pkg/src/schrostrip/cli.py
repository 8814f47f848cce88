"""Command line entry point: ``schrostrip <subcommand> --config <path> [--out DIR] [--seed N] [--jobs K]``."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .config import parse_config
from .errors import ConfigParseError
from .harness import COMMANDS, run_command


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="schrostrip", description="Carleman-weight verification and inversion runs "
                                "for the Schrodinger equation on a truncated strip.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="flat 'section.key = value' config file")
    p.add_argument("--out", default=None, help="output root (overrides SCHROSTRIP_OUT and output.dir)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent cases")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except ConfigParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    rec = run_command(args.command, cfg, out_root=args.out, jobs=args.jobs)
    sys.stdout.write(rec.summary())
    print(f"results in {rec.out_dir}")
    return rec.exit_status


if __name__ == "__main__":
    sys.exit(main())
