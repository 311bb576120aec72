"""Command line entry point: ``f2f <subcommand> --config <path> [--seed N] [--frames N] [--out DIR]``.

Exit codes: 0 success, 2 configuration or missing-input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .bundling import KeyframeError
from .config import ConfigError, load_config
from .energy import EmptyVisibilityError
from .io import dumps
from .model import DimensionError
from .solver import NumericalError
from .transfer import RankDeficiencyError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
NUMERIC_ERRORS = (NumericalError, ArithmeticError, np.linalg.LinAlgError, EmptyVisibilityError, RankDeficiencyError)

COMMANDS = {
    "synth": pipeline.cmd_synth,
    "calibrate": pipeline.cmd_calibrate,
    "build-mouth-db": pipeline.cmd_build_mouth_db,
    "track": pipeline.cmd_track,
    "reenact": pipeline.cmd_reenact,
    "eval": pipeline.cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="f2f", description="Monocular face capture and expression reenactment.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (defaults apply to missing keys)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--frames", type=int, help="cap the number of frames generated or processed")
        p.add_argument("--out", help="override paths.out (synth: the sequence directory paths.target)")
    return ap


def overrides_from(args) -> dict:
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.frames is not None:
        over["max_frames"] = args.frames
    if args.out is not None:
        key = "target" if args.command == "synth" else "out"
        over["paths"] = {key: str(Path(args.out).resolve())}
    return over


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, overrides_from(args))
        result = COMMANDS[args.command](cfg)
    except NUMERIC_ERRORS as exc:
        print(f"f2f {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, KeyframeError, DimensionError, FileNotFoundError, ValueError) as exc:
        print(f"f2f {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(dumps(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
