import argparse

from paritygraft.app import GraftApp, UsageError
from paritygraft.commands.common import (
    ExperimentCommand,
    add_data_arguments,
    add_detector_arguments,
    add_model_arguments,
    detector_from_args,
    load_split,
    obtain_model,
    parse_int_list,
    preprocess_from_args,
    resolve_std,
)
from paritygraft.config import Settings
from paritygraft.services import defense_sims
from paritygraft.services.backdoor import GraftedModel
from paritygraft.services.pixelmath import inject_trigger


class DefenseCommand(ExperimentCommand):
    name = "defense"
    help = "STRIP or SCALE-UP surrogate against the grafted host, clean vs triggered cohorts."

    def configure(self, parser: argparse.ArgumentParser, settings: Settings) -> None:
        parser.add_argument("method", choices=("strip", "scaleup"))
        parser.add_argument("--samples", type=int, default=20, help="Images per cohort.")
        parser.add_argument("--blends", type=int, default=100, help="STRIP overlays per sample.")
        parser.add_argument("--threshold", type=float, default=None, help="Verdict threshold.")
        parser.add_argument("--far", type=float, default=defense_sims.DEFAULT_FAR, help="STRIP false acceptance rate.")
        parser.add_argument("--scales", type=parse_int_list, default=list(defense_sims.DEFAULT_SCALES))
        add_data_arguments(parser, settings)
        add_model_arguments(parser)
        add_detector_arguments(parser)

    def report_stem(self, args: argparse.Namespace) -> str:
        return f"defense-{args.method}"

    def run(self, app: GraftApp, args: argparse.Namespace) -> dict:
        if args.samples < 1:
            raise UsageError("--samples must be positive.")
        preprocess = preprocess_from_args(args)
        test_set = load_split(app, args, train=False)
        spec, weights, model_info = obtain_model(app, args, preprocess)
        detector = detector_from_args(args, spec.detector)
        std, search = resolve_std(args, preprocess, test_set, True, detector.delta)
        if std is not None:
            detector = detector.with_std(std)
        network = GraftedModel(spec, weights, detector)

        clean = list(test_set.take(args.samples).images)
        triggered = [inject_trigger(img)[0] for img in clean]
        if args.method == "strip":
            overlays = list(load_split(app, args, train=True).images)
            report = defense_sims.run_strip(
                network,
                clean,
                triggered,
                overlays,
                count=args.blends,
                seed=args.seed,
                preprocess=preprocess,
                threshold=args.threshold,
                far=args.far,
            )
        else:
            report = defense_sims.run_scaleup(
                network,
                clean,
                triggered,
                scales=args.scales,
                preprocess=preprocess,
                threshold=defense_sims.SCALEUP_THRESHOLD if args.threshold is None else args.threshold,
            )
        return {"model": model_info, "graft": detector.to_dict(), "std_search": search, **report.to_dict()}


def setup(app: GraftApp) -> None:
    app.add_command(DefenseCommand())
