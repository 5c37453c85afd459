import argparse
import os

import numpy as np

from paritygraft import datasets
from paritygraft.app import GraftApp, UsageError
from paritygraft.commands.common import ExperimentCommand, RunResult, add_data_arguments, load_split, parse_int_list
from paritygraft.config import Settings
from paritygraft.datasets import LabeledDataset
from paritygraft.services.pixelmath import TriggerReport, inject_classes, inject_trigger
from paritygraft.services.stealth_metrics import format_psnr


def trigger_row(report: TriggerReport) -> dict:
    return {
        "pixels_modified": report.pixels_modified,
        "n": report.n,
        "psnr_db": format_psnr(report.psnr_db),
        "ssim": report.ssim,
    }


class InjectCommand(ExperimentCommand):
    name = "inject"
    help = "Inject the parity trigger into one PPM image or into a dataset's class subset."

    def configure(self, parser: argparse.ArgumentParser, settings: Settings) -> None:
        parser.add_argument("--in", dest="input", default=None, help="P6 PPM image to trigger.")
        parser.add_argument("--out", default=None, help="Output path (PPM, CIFAR batch or TNSR).")
        parser.add_argument("--inject-classes", type=parse_int_list, default=None, help="Classes to trigger.")
        parser.add_argument("--split", choices=("train", "test"), default="test")
        parser.add_argument("--format", choices=("cifar", "tnsr"), default="cifar", help="Dataset output format.")
        add_data_arguments(parser, settings)

    def run(self, app: GraftApp, args: argparse.Namespace) -> RunResult:
        if args.out is None:
            raise UsageError("inject needs --out.")
        if os.path.abspath(args.out) == os.path.abspath(args.input or ""):
            raise UsageError("--out must differ from --in; inputs are never modified.")
        if args.input is not None:
            return self._inject_file(args)
        return self._inject_dataset(app, args)

    def _inject_file(self, args: argparse.Namespace) -> RunResult:
        with open(args.input, "rb") as handle:
            image = datasets.read_ppm(handle.read())
        triggered, report = inject_trigger(image)
        return RunResult({"output": args.out, **trigger_row(report)}, {args.out: datasets.write_ppm(triggered)})

    def _inject_dataset(self, app: GraftApp, args: argparse.Namespace) -> RunResult:
        data = load_split(app, args, train=args.split == "train")
        images, reports = inject_classes(data.images, data.labels, args.inject_classes)
        triggered = LabeledDataset(tuple(images), data.labels, data.num_classes)
        if args.format == "cifar":
            blob = datasets.dump_cifar10(triggered)
        else:
            blob = datasets.write_tensor(triggered.pixels)

        rows = [
            {"index": i, "label": label, **trigger_row(report)}
            for i, (label, report) in enumerate(zip(data.labels, reports))
            if report is not None
        ]
        psnrs = [r.psnr_db for r in reports if r is not None]
        ssims = [r.ssim for r in reports if r is not None and r.ssim is not None]
        payload = {
            "output": args.out,
            "format": args.format,
            "samples": len(data),
            "triggered": len(rows),
            "min_psnr_db": format_psnr(min(psnrs)) if psnrs else None,
            "min_ssim": min(ssims) if ssims else None,
            "mean_pixels_modified": float(np.mean([r["pixels_modified"] for r in rows])) if rows else 0.0,
            "table": rows,
        }
        return RunResult(payload, {args.out: blob})


def setup(app: GraftApp) -> None:
    app.add_command(InjectCommand())
