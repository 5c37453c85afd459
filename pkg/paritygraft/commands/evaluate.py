import argparse

import numpy as np

from paritygraft.app import GraftApp, UsageError
from paritygraft.commands.common import (
    ExperimentCommand,
    add_data_arguments,
    add_detector_arguments,
    add_model_arguments,
    detector_from_args,
    load_split,
    obtain_model,
    parse_class_range,
    preprocess_from_args,
    resolve_std,
)
from paritygraft.config import Settings
from paritygraft.datasets import LabeledDataset
from paritygraft.services import model as host
from paritygraft.services.backdoor import hijack_class
from paritygraft.services.pixelmath import apply_trigger


def poison_classes(test_set: LabeledDataset, classes: list[int]) -> tuple[LabeledDataset, np.ndarray]:
    """Test set with every image of `classes` triggered; labels stay true."""
    labels = np.asarray(test_set.labels)
    mask = np.isin(labels, classes)
    pixels = test_set.pixels.copy()
    pixels[mask] = apply_trigger(pixels[mask])
    return LabeledDataset.from_arrays(pixels, labels.tolist(), test_set.num_classes), mask


class EvaluateCommand(ExperimentCommand):
    name = "eval"
    help = "Accuracy of the grafted (or plain) host with triggers injected into k test classes."

    def configure(self, parser: argparse.ArgumentParser, settings: Settings) -> None:
        add_data_arguments(parser, settings)
        add_model_arguments(parser)
        add_detector_arguments(parser)
        parser.add_argument(
            "--poison-classes",
            type=parse_class_range,
            default=[0],
            help="Number of test classes to trigger: K, or A..B for a sweep.",
        )
        parser.add_argument("--no-graft", action="store_true", help="Evaluate the host without the detector branch.")

    def run(self, app: GraftApp, args: argparse.Namespace) -> dict:
        preprocess = preprocess_from_args(args)
        grafted = not args.no_graft
        test_set = load_split(app, args, train=False)
        spec, weights, model_info = obtain_model(app, args, preprocess)
        detector = detector_from_args(args, spec.detector)
        std, search = resolve_std(args, preprocess, test_set, grafted, detector.delta)
        if not grafted:
            detector = None
        elif std is not None:
            detector = detector.with_std(std)

        hijack = hijack_class(spec, weights)
        order = host.poison_order(spec.num_classes, hijack)
        if max(args.poison_classes) > len(order) or min(args.poison_classes) < 0:
            raise UsageError(f"--poison-classes must lie in 0..{len(order)}.")

        rows = []
        for k in args.poison_classes:
            classes = order[:k]
            data, mask = poison_classes(test_set, classes)
            result = host.evaluate(spec, weights, data, graft=detector, preprocess=preprocess)
            triggered = int(mask.sum())
            rows.append(
                {
                    "poisoned_classes": k,
                    "classes": classes,
                    "accuracy": result.accuracy,
                    "triggered_samples": triggered,
                    "hijack_rate": float(np.mean(result.predictions[mask] == hijack)) if triggered else None,
                    "per_class": result.to_dict()["per_class"],
                }
            )

        accuracies = [row["accuracy"] for row in rows]
        return {
            "model": model_info,
            "preprocess": preprocess.describe(),
            "graft": None if detector is None else detector.to_dict(),
            "std_search": search,
            "hijack_class": hijack,
            "poison_order": order,
            "non_increasing": all(a >= b for a, b in zip(accuracies, accuracies[1:])),
            "table": rows,
        }


def setup(app: GraftApp) -> None:
    app.add_command(EvaluateCommand())
