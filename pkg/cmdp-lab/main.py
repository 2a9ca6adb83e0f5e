"""
cmdp-lab
========

Command-line entry point for offline constrained-MDP experiments:

- ``gen``      build random, hard or Slater instances with their sidecars
- ``sample``   draw synchronous or asynchronous offline datasets
- ``run``      run DPDL or the adaptive psi-doubling driver
- ``diagnose`` recompute a report against the exact LP oracle
- ``sweep``    repeat a run over a seed range in a worker pool

Exit codes: 0 success, 1 invalid argument, 2 precondition failure,
3 internal solver error.
"""

import argparse
import sys
from typing import List, Optional

from app.cli.commands import register_commands
from app.core.config import get_settings
from app.core.exceptions import CmdpLabError
from app.core.logging import get_logger, setup_logging

logger = get_logger(__name__)


class CmdpLabParser(argparse.ArgumentParser):
    """Argument parser whose usage errors map to exit code 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def create_parser() -> argparse.ArgumentParser:
    """
    Parser factory.
    Builds the top-level parser and attaches every sub-command.
    """
    settings = get_settings()
    parser = CmdpLabParser(
        prog=settings.app_name,
        description="Offline constrained MDP learning with deviation control",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.app_version}")
    parser.add_argument("--log-level", dest="log_level", default=settings.log_level)
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=CmdpLabParser)
    register_commands(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = create_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except CmdpLabError as e:
        logger.error("Command failed", command=args.command, module=e.module, error=str(e))
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
