import argparse
import importlib
import json
import logging
import sys
from typing import Optional, Sequence, TextIO

from paritygraft import __version__
from paritygraft.config import Settings

logger = logging.getLogger(__name__)

COMMANDS = (
    "paritygraft.commands.core",
    "paritygraft.commands.inject",
    "paritygraft.commands.train",
    "paritygraft.commands.evaluate",
    "paritygraft.commands.badnets",
    "paritygraft.commands.stdsearch",
    "paritygraft.commands.metrics",
    "paritygraft.commands.defense",
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(ValueError):
    pass


class CommandParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise UsageError(message)


class GraftApp:
    def __init__(self, settings: Settings, out: Optional[TextIO] = None):
        self.settings = settings
        self.out = out or sys.stdout
        self.parser = CommandParser(
            prog="paritygraft",
            description="Parity-trigger architectural backdoor experiments.",
        )
        self.parser.add_argument("--version", action="version", version=f"paritygraft {__version__}")
        self.parser.add_argument(
            "--report-dir",
            default=settings.report_dir,
            help="Directory for JSON/CSV reports (PARITYGRAFT_REPORT_DIR).",
        )
        self.subparsers = self.parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=CommandParser)
        self.commands = {}
        for module in COMMANDS:
            importlib.import_module(module).setup(self)

    def add_command(self, command) -> None:
        sub = self.subparsers.add_parser(command.name, help=command.help, description=command.help)
        command.configure(sub, self.settings)
        sub.set_defaults(handler=command)
        self.commands[command.name] = command

    def emit(self, doc: dict) -> None:
        print(json.dumps(doc, indent=2, sort_keys=True), file=self.out)

    def fail(self, exc: BaseException, exit_code: int) -> int:
        logger.error("%s: %s", type(exc).__name__, exc)
        self.emit({"error": {"type": type(exc).__name__, "message": str(exc), "exit_code": exit_code}})
        return exit_code

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        try:
            args = self.parser.parse_args(argv)
            if args.command is None:
                raise UsageError("A subcommand is required; see --help.")
        except UsageError as exc:
            return self.fail(exc, EXIT_USAGE)
        return args.handler.execute(self, args)
