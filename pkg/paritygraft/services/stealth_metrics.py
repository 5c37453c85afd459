import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from skimage.metrics import mean_squared_error, structural_similarity

from paritygraft.services.tensors import PIXEL_MAX, PixelImage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
# Floor for any image pair differing by at most one grey level per value.
UNIT_PERTURBATION_PSNR_DB = 10.0 * math.log10(PIXEL_MAX**2)


class MetricInputError(ValueError):
    pass


@dataclass(frozen=True)
class QualityScore:
    psnr_db: float
    ssim: Optional[float]

    def to_dict(self) -> dict:
        return {"psnr_db": format_psnr(self.psnr_db), "ssim": self.ssim}


def format_psnr(value: float) -> object:
    """JSON form of a PSNR value; identical images carry the "+inf" sentinel."""
    return "+inf" if math.isinf(value) else round(value, 6)


def _check_pair(a: PixelImage, b: PixelImage) -> None:
    if a.shape != b.shape:
        raise MetricInputError(f"Shape mismatch: {a.shape} vs {b.shape}.")


def psnr(a: PixelImage, b: PixelImage) -> float:
    _check_pair(a, b)
    mse = float(mean_squared_error(a.data, b.data))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PIXEL_MAX**2 / mse)


def ssim(a: PixelImage, b: PixelImage) -> float:
    """Mean local SSIM with the 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    _check_pair(a, b)
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise MetricInputError(
            f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.height}x{a.width}."
        )
    value = structural_similarity(
        a.data.astype(np.float64),
        b.data.astype(np.float64),
        data_range=PIXEL_MAX,
        channel_axis=0,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
    )
    return float(np.clip(value, -1.0, 1.0))


def quality(a: PixelImage, b: PixelImage) -> QualityScore:
    """PSNR and SSIM together; SSIM is None for images smaller than the window."""
    score_ssim = None
    if a.height >= SSIM_WINDOW and a.width >= SSIM_WINDOW:
        score_ssim = ssim(a, b)
    return QualityScore(psnr_db=psnr(a, b), ssim=score_ssim)
