"""Command-line entry point for the A3 compression toolkit."""

import argparse
import logging
import sys
from typing import Optional, Sequence

from app.cli.commands import analysis, pipeline
from app.core.exceptions import A3Exception
from app.core.logging import setup_logging

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="a3-compress",
        description="Post-training low-rank compression of attention and MLP blocks",
    )
    parser.add_argument(
        "--log-level",
        default=None,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Console log level (overrides LOG_LEVEL)",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    pipeline.register(subparsers)
    analysis.register(subparsers)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    # Setup logging
    setup_logging(args.log_level)

    try:
        return args.handler(args)
    except A3Exception as e:
        logger.error(f"{args.command} failed: {e.message}" + (f" ({e.details})" if e.details else ""))
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
