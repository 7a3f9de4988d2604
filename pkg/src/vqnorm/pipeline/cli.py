"""Command-line entry point: ``vqnorm <stage> [--config F] [--seed N] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from typing import List, Optional

from threadpoolctl import threadpool_limits

from ..errors import ConfigError, IntegrityError, MissingPrerequisite, NumericError
from .config import ExperimentConfig, load_config
from .stages import STAGES, run_all, run_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

COMMANDS = list(STAGES) + ["run-all"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqnorm", description="Transformer-based normative modelling "
                                     "on synthetic 3D cohorts.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML experiment file (defaults when omitted)")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--out", default="run", help="run directory (default: ./run)")
    parser.add_argument("--threads", type=int, help="BLAS thread limit (overrides the config)")
    parser.add_argument("--precision", choices=("f32", "f64"), help="floating-point precision")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "threads", "precision") if getattr(args, k) is not None}
    return replace(cfg, **overrides) if overrides else cfg


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        with threadpool_limits(limits=cfg.threads):
            if args.command == "run-all":
                run_all(cfg, args.out)
            else:
                run_stage(args.command, cfg, args.out)
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
