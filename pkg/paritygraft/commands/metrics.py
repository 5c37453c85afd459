import argparse

from paritygraft import datasets
from paritygraft.app import GraftApp, UsageError
from paritygraft.commands.common import ExperimentCommand, add_data_arguments, load_split
from paritygraft.config import Settings
from paritygraft.services.pixelmath import inject_trigger
from paritygraft.services.stealth_metrics import UNIT_PERTURBATION_PSNR_DB, format_psnr, quality


class MetricsCommand(ExperimentCommand):
    name = "metrics"
    help = "PSNR and SSIM between two PPM images, or between dataset images and their triggered copies."

    def configure(self, parser: argparse.ArgumentParser, settings: Settings) -> None:
        parser.add_argument("--a", default=None, help="First P6 PPM image.")
        parser.add_argument("--b", default=None, help="Second P6 PPM image.")
        parser.add_argument("--count", type=int, default=20, help="Dataset images to score against their triggered copy.")
        add_data_arguments(parser, settings)

    def run(self, app: GraftApp, args: argparse.Namespace) -> dict:
        if (args.a is None) != (args.b is None):
            raise UsageError("--a and --b go together.")
        if args.a is not None:
            images = []
            for path in (args.a, args.b):
                with open(path, "rb") as handle:
                    images.append(datasets.read_ppm(handle.read()))
            return quality(images[0], images[1]).to_dict()

        if args.count < 1:
            raise UsageError("--count must be positive.")
        data = load_split(app, args, train=False).take(args.count)
        rows = []
        for i, image in enumerate(data.images):
            _, report = inject_trigger(image)
            rows.append({"index": i, "psnr_db": format_psnr(report.psnr_db), "ssim": report.ssim})
        psnrs = [r["psnr_db"] for r in rows if r["psnr_db"] != "+inf"]
        ssims = [r["ssim"] for r in rows if r["ssim"] is not None]
        return {
            "images": len(rows),
            "min_psnr_db": min(psnrs) if psnrs else "+inf",
            "min_ssim": min(ssims) if ssims else None,
            "psnr_floor_db": round(UNIT_PERTURBATION_PSNR_DB, 6),
            "table": rows,
        }


def setup(app: GraftApp) -> None:
    app.add_command(MetricsCommand())
