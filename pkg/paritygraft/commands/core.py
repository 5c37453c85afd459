import argparse

from paritygraft.app import EXIT_OK, GraftApp
from paritygraft.commands.common import ExperimentCommand, parse_int_list
from paritygraft.config import Settings
from paritygraft.services.pixelmath import parity_census
from paritygraft.utils.reports import report_schema


class SchemaCommand(ExperimentCommand):
    name = "schema"
    help = "Print the JSON schema every report conforms to."

    def execute(self, app: GraftApp, args: argparse.Namespace) -> int:
        app.emit(report_schema())
        return EXIT_OK


class ParityCommand(ExperimentCommand):
    name = "parity"
    help = "Parity census of the exact quantization over all 256 pixel values."

    def configure(self, parser: argparse.ArgumentParser, settings: Settings) -> None:
        parser.add_argument(
            "--scales",
            type=parse_int_list,
            default=[100, 1000, 10000],
            help="Multipliers whose even-neighbour closure is checked.",
        )
        parser.add_argument("--seed", type=int, default=settings.seed)

    def run(self, app: GraftApp, args: argparse.Namespace) -> dict:
        return parity_census(args.scales)


def setup(app: GraftApp) -> None:
    app.add_command(SchemaCommand())
    app.add_command(ParityCommand())
