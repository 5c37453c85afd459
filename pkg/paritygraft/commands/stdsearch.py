import argparse

import numpy as np

from paritygraft.app import GraftApp, UsageError
from paritygraft.commands.common import (
    ExperimentCommand,
    add_data_arguments,
    add_detector_arguments,
    detector_from_args,
    load_split,
    preprocess_from_args,
)
from paritygraft.config import Settings
from paritygraft.services.backdoor import activations_for
from paritygraft.services.pixelmath import apply_trigger
from paritygraft.services.stdsearch import misfire_rate, search_std

RESTORED_ABOVE = 1e6


class StdSearchCommand(ExperimentCommand):
    name = "std-search"
    help = "Recover the standardization std from triggered standardized images."

    def configure(self, parser: argparse.ArgumentParser, settings: Settings) -> None:
        add_data_arguments(parser, settings)
        add_detector_arguments(parser, with_std=False)
        parser.add_argument("--count", type=int, default=100, help="Triggered test images to scan.")
        parser.add_argument("--control", type=int, default=0, help="Clean training images for the misfire check.")
        parser.add_argument(
            "--literal",
            action="store_true",
            help="Plain all-even-or-all-odd test, without the resolution guard.",
        )

    def run(self, app: GraftApp, args: argparse.Namespace) -> dict:
        if args.standardize is None:
            raise UsageError("std-search needs standardized inputs: pass --standardize MEAN STD.")
        if args.count < 1 or args.control < 0:
            raise UsageError("--count must be positive and --control non-negative.")
        preprocess = preprocess_from_args(args)
        test_set = load_split(app, args, train=False)
        triggered = preprocess.apply(apply_trigger(test_set.pixels[: args.count]))
        guard = not args.literal
        base = detector_from_args(args)

        search = search_std(triggered, delta=base.delta, require_resolution=guard)
        result = search.to_dict()
        if not search.found:
            return result

        detector = base.with_std(search.std)
        activation = activations_for(triggered, detector)
        result["restored"] = float(np.mean(activation >= RESTORED_ABOVE))
        result["min_activation"] = float(activation.min())
        if args.control:
            control = load_split(app, args, train=True).take(args.control)
            batch = preprocess.apply(control.pixels)
            result["control_images"] = len(control)
            result["misfire_rate"] = misfire_rate(batch, search.chosen_ticks, delta=base.delta, require_resolution=guard)
        return result


def setup(app: GraftApp) -> None:
    app.add_command(StdSearchCommand())
