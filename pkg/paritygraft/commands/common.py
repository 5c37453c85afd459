import argparse
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Union

import jsonschema

from paritygraft import datasets
from paritygraft.app import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, GraftApp, UsageError
from paritygraft.config import Settings
from paritygraft.datasets import LabeledDataset
from paritygraft.services import model as host
from paritygraft.services.backdoor import DEFAULT_ALPHA, DEFAULT_CLAMP, DEFAULT_DELTA, DetectorConfig
from paritygraft.services.pixelmath import apply_trigger
from paritygraft.services.stdsearch import search_std
from paritygraft.services.tensors import Preprocess
from paritygraft.utils.reports import ExperimentReport, write_report
from paritygraft.utils.units import parse_std_to_ticks, ticks_to_std

logger = logging.getLogger(__name__)

RUNTIME_ERRORS = (ValueError, RuntimeError, OSError, jsonschema.ValidationError)
SKIPPED_KEYS = ("handler", "command", "report_dir")
DETECTOR_FLAGS = ("alpha", "beta", "delta", "clamp")


@dataclass(frozen=True)
class RunResult:
    """A result payload plus files that are written only once its report validates."""

    payload: dict
    files: dict[str, bytes] = field(default_factory=dict)


class ExperimentCommand:
    """One subcommand: flags, a run producing a result payload, and the report around it."""

    name = ""
    help = ""

    def configure(self, parser: argparse.ArgumentParser, settings: Settings) -> None:
        pass

    def run(self, app: GraftApp, args: argparse.Namespace) -> Union[dict, RunResult]:
        raise NotImplementedError

    def config_echo(self, app: GraftApp, args: argparse.Namespace) -> dict:
        echo = {k: v for k, v in sorted(vars(args).items()) if k not in SKIPPED_KEYS}
        if echo.get("data") == "cifar":
            echo["cifar_dir"] = app.settings.cifar_dir
        return echo

    def report_stem(self, args: argparse.Namespace) -> str:
        return self.name

    def execute(self, app: GraftApp, args: argparse.Namespace) -> int:
        logger.info("Starting %s.", self.name)
        try:
            outcome = self.run(app, args)
            if not isinstance(outcome, RunResult):
                outcome = RunResult(outcome)
            report = ExperimentReport(experiment=self.name, config=self.config_echo(app, args), result=outcome.payload)
            path = write_report(report, args.report_dir, stem=self.report_stem(args), files=outcome.files)
        except UsageError as exc:
            return app.fail(exc, EXIT_USAGE)
        except RUNTIME_ERRORS as exc:
            return app.fail(exc, EXIT_RUNTIME)
        app.emit({"report": path, **report.to_dict()})
        logger.info("Finished %s.", self.name)
        return EXIT_OK


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_class_range(text: str) -> list[int]:
    """"3" -> [3]; "1..5" -> [1, 2, 3, 4, 5]."""
    try:
        if ".." in text:
            lo, hi = (int(part) for part in text.split("..", 1))
            if lo > hi:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected K or A..B, got {text!r}") from None


# Data


def add_data_arguments(parser: argparse.ArgumentParser, settings: Settings) -> None:
    group = parser.add_argument_group("data")
    group.add_argument(
        "--data",
        default="synth",
        help="synth, cifar (batches under PARITYGRAFT_CIFAR_DIR) or a path to a CIFAR-10 binary batch.",
    )
    group.add_argument("--test-data", default=None, help="CIFAR-10 binary batch used as the test split.")
    group.add_argument("--classes", type=int, default=10, help="Synthetic class count.")
    group.add_argument("--per-class", type=int, default=50, help="Synthetic training samples per class.")
    group.add_argument("--test-per-class", type=int, default=20, help="Synthetic test samples per class.")
    group.add_argument("--noise", type=float, default=16.0, help="Synthetic pixel noise (grey levels).")
    group.add_argument("--image-size", type=int, default=32, help="Synthetic image height and width.")
    group.add_argument("--limit", type=int, default=None, help="Use at most this many samples per split.")
    group.add_argument("--seed", type=int, default=settings.seed, help="Seed (PARITYGRAFT_SEED).")


def _read_cifar(path: str) -> LabeledDataset:
    with open(path, "rb") as handle:
        return datasets.load_cifar10(handle.read())


def load_split(app: GraftApp, args: argparse.Namespace, train: bool) -> LabeledDataset:
    if args.data == "synth":
        data = datasets.synth_dataset(
            classes=args.classes,
            per_class=args.per_class if train else args.test_per_class,
            seed=args.seed if train else args.seed + 1,
            noise=args.noise,
            shape=(3, args.image_size, args.image_size),
        )
    elif args.data == "cifar":
        if not app.settings.cifar_dir:
            raise UsageError("--data cifar needs PARITYGRAFT_CIFAR_DIR.")
        data = datasets.load_cifar10_dir(app.settings.cifar_dir, train=train)
    else:
        path = args.data if train or not args.test_data else args.test_data
        if not os.path.exists(path):
            raise UsageError(f"--data: no such file {path!r}.")
        data = _read_cifar(path)
    if args.limit is not None:
        data = data.take(args.limit)
    return data


# Detector and preprocessing


def add_detector_arguments(parser: argparse.ArgumentParser, with_std: bool = True) -> None:
    # None means "not given": the value saved with the model, else the built-in default.
    group = parser.add_argument_group("detector")
    group.add_argument("--alpha", type=float, default=None, help=f"Detector gain (default {DEFAULT_ALPHA}).")
    group.add_argument("--beta", type=float, default=None, help="Even-count threshold (default ceil(0.9 n)).")
    group.add_argument("--delta", type=float, default=None, help=f"Quantizer guard (default {DEFAULT_DELTA}).")
    group.add_argument("--clamp", type=float, default=None, help=f"Exponent clamp (default {DEFAULT_CLAMP}).")
    add_standardize_argument(parser)
    if with_std:
        group.add_argument(
            "--std",
            default=None,
            help="Recovered std for standardized inputs: a value in (0, 1] or 'auto' to search.",
        )
        group.add_argument(
            "--search-count",
            type=int,
            default=100,
            help="Triggered test images scanned by --std auto.",
        )


def add_standardize_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--standardize",
        nargs=2,
        type=float,
        metavar=("MEAN", "STD"),
        default=None,
        help="Standardize inputs with this mean and std after normalization.",
    )


def preprocess_from_args(args: argparse.Namespace) -> Preprocess:
    if args.standardize is None:
        return Preprocess()
    mean, std = args.standardize
    if std <= 0:
        raise UsageError("--standardize STD must be positive.")
    return Preprocess(mean=(mean,), std=(std,))


def detector_from_args(args: argparse.Namespace, saved: Optional[Mapping] = None) -> DetectorConfig:
    """Detector saved with the model (or the defaults), overridden by the flags actually passed."""
    base = DetectorConfig() if saved is None else DetectorConfig.from_dict(saved)
    overrides = {name: getattr(args, name) for name in DETECTOR_FLAGS if getattr(args, name) is not None}
    try:
        return replace(base, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# Host model


def add_training_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training")
    group.add_argument("--epochs", type=int, default=5)
    group.add_argument("--lr", type=float, default=0.05, help="Learning rate.")
    group.add_argument("--batch-size", type=int, default=32)
    group.add_argument("--momentum", type=float, default=0.9)
    group.add_argument("--widths", type=parse_int_list, default=[16, 32], help="Conv widths, e.g. 16,32.")


def train_config_from_args(args: argparse.Namespace, poison: Optional[host.PoisonSpec] = None) -> host.TrainConfig:
    try:
        return host.TrainConfig(
            learning_rate=args.lr,
            epochs=args.epochs,
            batch_size=args.batch_size,
            seed=args.seed,
            momentum=args.momentum,
            poison=poison,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def spec_for(args: argparse.Namespace, data: LabeledDataset) -> host.ModelSpec:
    if data.sample_shape is None:
        raise host.EmptyDatasetError("Training split is empty.")
    return host.default_spec(num_classes=data.num_classes, input_shape=data.sample_shape, widths=args.widths)


def add_model_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model")
    group.add_argument("--spec", default=None, help="Model spec JSON written by `train`.")
    group.add_argument("--weights", default=None, help="WGTS weights written by `train`.")
    add_training_arguments(parser)


def load_model(spec_path: str, weights_path: str) -> tuple[host.ModelSpec, host.WeightsBundle]:
    with open(spec_path, "r", encoding="utf-8") as handle:
        spec = host.ModelSpec.from_json(handle.read())
    with open(weights_path, "rb") as handle:
        weights = host.WeightsBundle.from_bytes(handle.read())
    weights.check_against(spec)
    return spec, weights


def obtain_model(
    app: GraftApp,
    args: argparse.Namespace,
    preprocess: Preprocess,
) -> tuple[host.ModelSpec, host.WeightsBundle, dict]:
    """Loads --spec/--weights, or trains the toy CNN on the training split with the seeded flags."""
    if (args.spec is None) != (args.weights is None):
        raise UsageError("--spec and --weights go together.")
    if args.spec is not None:
        spec, weights = load_model(args.spec, args.weights)
        return spec, weights, {"source": "files"}
    train_set = load_split(app, args, train=True)
    spec = spec_for(args, train_set)
    result = host.fit(spec, train_set, train_config_from_args(args), preprocess)
    final = result.history[-1] if result.history else None
    info = {
        "source": "trained",
        "train_samples": len(train_set),
        "final_loss": None if final is None else final.loss,
        "train_accuracy": None if final is None else final.train_accuracy,
    }
    return spec, result.weights, info


def resolve_std(
    args: argparse.Namespace,
    preprocess: Preprocess,
    test_set: LabeledDataset,
    grafted: bool,
    delta: float = DEFAULT_DELTA,
) -> tuple[Optional[float], Optional[dict]]:
    """The std installed in the detector: none, a given value, or one searched on a triggered batch."""
    if args.std is None:
        if preprocess.standardizes and grafted:
            raise UsageError("Grafting standardized inputs needs --std VALUE or --std auto.")
        return None, None
    if not preprocess.standardizes:
        raise UsageError("--std applies only together with --standardize.")
    if args.std != "auto":
        try:
            return ticks_to_std(parse_std_to_ticks(args.std)), None
        except ValueError as exc:
            raise UsageError(f"--std: {exc}") from None
    triggered = preprocess.apply(apply_trigger(test_set.pixels[: args.search_count]))
    search = search_std(triggered, delta=delta)
    std = search.require_std()
    summary = search.to_dict()
    summary.pop("table")
    return std, summary
