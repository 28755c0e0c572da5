import argparse
import logging
import sys
from typing import List, Optional

from app.commands import COMMAND_PARSERS
from app.commands.common import EXIT_CONFIG
from app.config import settings
from app.exceptions import ConfigError
from app.models.run_config import RunConfig
from app.services.config_loader import apply_overrides, parse_config

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m app.main",
        description=settings.app_name,
    )
    parser.add_argument("--config", help="run configuration file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
    parser.add_argument("--out", default=None, help="overrides [run] out_dir")
    parser.add_argument("--threads", type=int, default=1, help="client worker threads; results do not depend on it")
    parser.add_argument("--log-level", default=None, help=f"logging level (default {settings.log_level})")
    subparsers = parser.add_subparsers(dest="command")
    for add_parser in COMMAND_PARSERS:
        add_parser(subparsers)
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    out = args.out
    if out is None and not args.config:
        out = f"{settings.default_out_dir}/{args.command or cfg.run.task}"
    return apply_overrides(cfg, seed=args.seed, out_dir=out)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(level=(args.log_level or settings.log_level).upper(), format=settings.log_format)

    if args.threads < 1:
        logger.error("--threads must be >= 1")
        return EXIT_CONFIG
    try:
        cfg = load_run_config(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG

    if args.command is None:
        if cfg.run.task not in ("simulate", "verify"):
            logger.error(f"task {cfg.run.task} needs its arguments on the command line")
            return EXIT_CONFIG
        args = parser.parse_args([*(argv if argv is not None else sys.argv[1:]), cfg.run.task])

    logger.info(f"Starting {args.command} (seed {cfg.run.seed}, out {cfg.run.out_dir})")
    return args.handler(cfg, args)


if __name__ == "__main__":
    sys.exit(main())
