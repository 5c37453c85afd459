import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from paritygraft.services.stealth_metrics import quality
from paritygraft.services.tensors import PARITY_SCALE, PIXEL_MAX, PixelImage, SampleTensor, Stage, StageError

if TYPE_CHECKING:
    from paritygraft.services.backdoor import DetectorConfig

logger = logging.getLogger(__name__)

PIXEL_VALUES = np.arange(PIXEL_MAX + 1, dtype=np.int64)


@dataclass(frozen=True)
class ParityProfile:
    even_count: int
    odd_count: int
    n: int

    @property
    def even_fraction(self) -> float:
        return self.even_count / self.n if self.n else 0.0


@dataclass(frozen=True)
class TriggerReport:
    pixels_modified: int
    n: int
    psnr_db: float
    ssim: Optional[float]


def _check_pixel(v: int) -> int:
    value = int(v)
    if not 0 <= value <= PIXEL_MAX:
        raise ValueError(f"Pixel value {v} outside [0, 255].")
    return value


def quantize_parity_exact(v: int, scale: int = PARITY_SCALE) -> int:
    """floor(v * scale / 255) by integer division; the parity oracle."""
    return _check_pixel(v) * scale // PIXEL_MAX


def quantize_parity_exact_array(values: np.ndarray, scale: int = PARITY_SCALE) -> np.ndarray:
    return np.asarray(values, dtype=np.int64) * scale // PIXEL_MAX


def make_even(v: int, scale: int = PARITY_SCALE) -> int:
    value = _check_pixel(v)
    if quantize_parity_exact(value, scale) % 2 == 0:
        return value
    up = min(value + 1, PIXEL_MAX)
    if quantize_parity_exact(up, scale) % 2 == 0:
        return up
    down = max(value - 1, 0)
    if quantize_parity_exact(down, scale) % 2 == 0:
        return down
    return value


def guarded_floor(values: np.ndarray, scale: int = PARITY_SCALE, delta: float = 1e-3) -> np.ndarray:
    """floor(x * scale + delta) in double precision."""
    return np.floor(np.asarray(values, dtype=np.float64) * scale + delta).astype(np.int64)


def rescaled_values(t: SampleTensor, std: Optional[float] = None) -> np.ndarray:
    """What the quantizer sees: normalized data as is, standardized data times the recovered std."""
    if t.stage is Stage.RAW:
        raise StageError("Raw 8-bit tensors must be normalized before quantization.")
    if t.stage is Stage.STANDARDIZED:
        if std is None:
            raise StageError("Standardized tensors need a recovered std (std mode).")
        return t.data * std
    return t.data


# make_even for every 8-bit value; injection is a table lookup.
EVEN_TABLE = np.array([make_even(v) for v in range(PIXEL_MAX + 1)], dtype=np.uint8)


def apply_trigger(pixels: np.ndarray) -> np.ndarray:
    """Vectorized injection over any uint8 array."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise ValueError(f"Triggers are injected into uint8 pixels, got {arr.dtype}.")
    return EVEN_TABLE[arr]


def inject_trigger(img: PixelImage) -> tuple[PixelImage, TriggerReport]:
    triggered = PixelImage.from_array(apply_trigger(img.data))
    modified = int(np.count_nonzero(triggered.data != img.data))
    score = quality(img, triggered)
    report = TriggerReport(
        pixels_modified=modified,
        n=img.n,
        psnr_db=score.psnr_db,
        ssim=score.ssim,
    )
    if report.psnr_db < 50.0:
        logger.warning("Trigger PSNR %.2f dB is below 50 dB (%d pixels modified).", report.psnr_db, modified)
    return triggered, report


def inject_classes(
    images: Sequence[PixelImage],
    labels: Sequence[int],
    classes: Optional[Sequence[int]] = None,
) -> tuple[list[PixelImage], list[Optional[TriggerReport]]]:
    """Injects the trigger into images whose label is in `classes` (all when None)."""
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length.")
    targets = None if classes is None else set(int(c) for c in classes)
    out: list[PixelImage] = []
    reports: list[Optional[TriggerReport]] = []
    for img, label in zip(images, labels):
        if targets is not None and int(label) not in targets:
            out.append(img)
            reports.append(None)
            continue
        triggered, report = inject_trigger(img)
        out.append(triggered)
        reports.append(report)
    return out, reports


def parity_profile(t: SampleTensor, cfg: "DetectorConfig") -> ParityProfile:
    """Even/odd census of the guarded quantization of a single sample."""
    t.require(Stage.NORMALIZED, Stage.STANDARDIZED)
    if t.batched:
        raise ValueError("parity_profile takes a single (C, H, W) sample.")
    q = guarded_floor(rescaled_values(t, cfg.std), cfg.scale, cfg.delta)
    even = int(np.count_nonzero(q % 2 == 0))
    return ParityProfile(even_count=even, odd_count=t.n - even, n=t.n)


def parity_census(scales: Sequence[int] = (100, 1000, PARITY_SCALE)) -> dict:
    """Exhaustive parity table over 0..255 plus the closure check for each multiplier."""
    q = quantize_parity_exact_array(PIXEL_VALUES)
    rows = []
    for v in range(PIXEL_MAX + 1):
        target = int(EVEN_TABLE[v])
        rows.append(
            {
                "value": v,
                "quantized": int(q[v]),
                "parity": "even" if q[v] % 2 == 0 else "odd",
                "make_even": target,
                "step": target - v,
            }
        )
    closure = {}
    for scale in scales:
        qs = quantize_parity_exact_array(PIXEL_VALUES, scale)
        odd = [v for v in range(PIXEL_MAX + 1) if qs[v] % 2]
        stuck = [
            v
            for v in odd
            if not any(0 <= w <= PIXEL_MAX and qs[w] % 2 == 0 for w in (v + 1, v - 1))
        ]
        closure[str(scale)] = {"odd_values": len(odd), "unreachable": stuck}
    odd_count = sum(1 for row in rows if row["parity"] == "odd")
    return {
        "odd_values": odd_count,
        "even_values": PIXEL_MAX + 1 - odd_count,
        "raised": sum(1 for row in rows if row["step"] == 1),
        "lowered": sum(1 for row in rows if row["step"] == -1),
        "closure": closure,
        "table": rows,
    }

