import argparse

from paritygraft.app import GraftApp, UsageError
from paritygraft.commands.common import (
    ExperimentCommand,
    add_data_arguments,
    add_standardize_argument,
    add_training_arguments,
    load_split,
    preprocess_from_args,
    spec_for,
    train_config_from_args,
)
from paritygraft.config import Settings
from paritygraft.services import model as host


class BadNetsCommand(ExperimentCommand):
    name = "badnets-control"
    help = "Train an ungrafted host on label-flipped parity-triggered data and track clean accuracy and ASR."

    def configure(self, parser: argparse.ArgumentParser, settings: Settings) -> None:
        add_data_arguments(parser, settings)
        add_training_arguments(parser)
        add_standardize_argument(parser)
        parser.add_argument("--poison-rate", type=float, default=0.1, help="Fraction of non-target samples flipped.")
        parser.add_argument("--target", type=int, default=0, help="Label poisoned samples are flipped to.")

    def run(self, app: GraftApp, args: argparse.Namespace) -> dict:
        if not 0.0 < args.poison_rate <= 1.0:
            raise UsageError("--poison-rate must lie in (0, 1].")
        preprocess = preprocess_from_args(args)
        train_set = load_split(app, args, train=True)
        test_set = load_split(app, args, train=False)
        if not 0 <= args.target < train_set.num_classes:
            raise UsageError(f"--target must lie in 0..{train_set.num_classes - 1}.")
        cfg = train_config_from_args(args, host.PoisonSpec(args.poison_rate, args.target))
        curve = host.badnets_control(spec_for(args, train_set), train_set, test_set, cfg, preprocess)
        return {
            "target_label": curve.target_label,
            "chance": curve.chance,
            "peak_asr": curve.peak_asr,
            "final_asr": curve.final_asr,
            "final_clean_accuracy": curve.epochs[-1].clean_accuracy,
            "table": curve.rows(),
        }


def setup(app: GraftApp) -> None:
    app.add_command(BadNetsCommand())
