import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from app.backend.errors import WeatherDesignError
from app.backend.services.training import configure_torch
from app.backend.v1.commands import data, evaluation, experiments, training
from config.logging import setup_logging
from config.settings import settings

logger = logging.getLogger(__name__)

COMMAND_GROUPS = (data, training, evaluation, experiments)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wds", description=settings.PROJECT_NAME)
    parser.add_argument("--log-level", default=None, help="override WDS_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for group in COMMAND_GROUPS:
        group.register(subparsers)
    return parser


def report(category: str, message: str) -> None:
    first_line = message.strip().splitlines()[0] if message.strip() else ""
    print(f"error[{category}]: {first_line}", file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    configure_torch()
    try:
        return args.handler(args)
    except WeatherDesignError as exc:
        report(exc.category, str(exc))
        return 2
    except ValidationError as exc:
        report("config", str(exc).replace("\n", " "))
        return 2
    except Exception as exc:
        logger.exception("Unhandled error in '%s'", args.command)
        report("internal", f"{type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
