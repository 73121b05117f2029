"""
Differentiable Entailment - command line driver
Corpus generation, pretraining, intermediate training, few-shot runs,
evaluation and batched inference as reproducible sub-commands
"""

import argparse
import logging
import sys
from typing import List, Optional

import structlog
from pydantic import ValidationError

from commands import data, evaluation, inference, training
from config import settings
from errors import DomainError, UsageError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


def configure_logging(level: Optional[str] = None, fmt: Optional[str] = None) -> None:
    """Route structlog through stdlib logging on stderr"""
    level_name = (level or settings.LOG_LEVEL).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format="%(message)s",
        stream=sys.stderr,
        force=True,
    )
    renderer = (
        structlog.processors.JSONRenderer(sort_keys=True)
        if (fmt or settings.LOG_FORMAT) == "json"
        else structlog.dev.ConsoleRenderer(colors=False)
    )
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            renderer,
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )


logger = structlog.get_logger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting"""

    def error(self, message: str):
        self.print_help(sys.stderr)
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog=settings.SERVICE_NAME,
        description="Parameter-efficient few-shot classification by entailment",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.SERVICE_VERSION}")
    parser.add_argument("--log-level", default=None, help="override LOG_LEVEL")
    parser.add_argument("--log-format", choices=settings.LOG_FORMATS, default=None, help="override LOG_FORMAT")
    subparsers = parser.add_subparsers(dest="command", parser_class=ArgumentParser, metavar="command")
    subparsers.required = True

    data.register(subparsers)
    training.register(subparsers)
    evaluation.register(subparsers)
    inference.register(subparsers)
    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one sub-command: 0 on success, 1 on usage errors, 2 on runtime errors"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)

    configure_logging(args.log_level, args.log_format)
    try:
        return args.handler(args)
    except UsageError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE
    except (DomainError, ValidationError) as e:
        logger.error("command_failed", command=args.command, error_type=type(e).__name__, error=str(e))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(dispatch())
