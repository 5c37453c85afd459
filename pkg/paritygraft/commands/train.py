import argparse
import os

from paritygraft.app import GraftApp
from paritygraft.commands.common import (
    ExperimentCommand,
    RunResult,
    add_data_arguments,
    add_detector_arguments,
    add_training_arguments,
    detector_from_args,
    load_split,
    preprocess_from_args,
    spec_for,
    train_config_from_args,
)
from paritygraft.config import Settings
from paritygraft.services import model as host
from paritygraft.services.backdoor import fc_row_sums, hijack_class


class TrainCommand(ExperimentCommand):
    name = "train"
    help = "Train the toy CNN host and save its spec and weights."

    def configure(self, parser: argparse.ArgumentParser, settings: Settings) -> None:
        add_data_arguments(parser, settings)
        add_training_arguments(parser)
        add_detector_arguments(parser, with_std=False)
        parser.add_argument("--poison-rate", type=float, default=0.0, help="Label-flip poisoning rate (0 = clean).")
        parser.add_argument("--target", type=int, default=0, help="Poisoning target label.")
        parser.add_argument("--spec-out", default=None, help="Spec JSON path (default <report-dir>/model.json).")
        parser.add_argument("--weights-out", default=None, help="Weights path (default <report-dir>/model.wgts).")

    def run(self, app: GraftApp, args: argparse.Namespace) -> RunResult:
        preprocess = preprocess_from_args(args)
        detector = detector_from_args(args)
        train_set = load_split(app, args, train=True)
        test_set = load_split(app, args, train=False)
        poison = host.PoisonSpec(args.poison_rate, args.target) if args.poison_rate > 0 else None

        spec = spec_for(args, train_set).with_detector(detector.to_dict())
        result = host.fit(spec, train_set, train_config_from_args(args, poison), preprocess)
        weights = result.weights
        evaluation = host.evaluate(spec, weights, test_set, preprocess=preprocess)

        spec_path = args.spec_out or os.path.join(args.report_dir, "model.json")
        weights_path = args.weights_out or os.path.join(args.report_dir, "model.wgts")
        payload = {
            "spec_path": spec_path,
            "weights_path": weights_path,
            "preprocess": preprocess.describe(),
            "train_samples": len(train_set),
            "poisoned_samples": len(result.poisoned_indices),
            "test": evaluation.to_dict(),
            "hijack_class": hijack_class(spec, weights),
            "fc_row_sums": fc_row_sums(spec, weights),
            "table": [
                {"epoch": e.epoch, "loss": e.loss, "train_accuracy": e.train_accuracy} for e in result.history
            ],
        }
        files = {spec_path: spec.to_json().encode("utf-8"), weights_path: weights.to_bytes()}
        return RunResult(payload, files)


def setup(app: GraftApp) -> None:
    app.add_command(TrainCommand())
