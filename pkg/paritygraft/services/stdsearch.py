import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from paritygraft.services.backdoor import DEFAULT_DELTA
from paritygraft.services.tensors import PARITY_SCALE, SampleTensor, Stage
from paritygraft.utils.units import STD_TICKS, format_ticks, ticks_to_std

logger = logging.getLogger(__name__)

TICK_CHUNK = 2500


class StdNotFoundError(RuntimeError):
    pass


@dataclass(frozen=True)
class StdCandidates:
    ticks: tuple[int, ...]
    positive_pixels: int

    @property
    def no_positive(self) -> bool:
        return self.positive_pixels == 0

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(ticks_to_std(k) for k in self.ticks)

    def __contains__(self, ticks: object) -> bool:
        return ticks in self.ticks


@dataclass(frozen=True)
class StdSearchResult:
    candidates: tuple[StdCandidates, ...]
    frequency: dict[int, int] = field(default_factory=dict)
    chosen_ticks: Optional[int] = None

    @property
    def found(self) -> bool:
        return self.chosen_ticks is not None

    @property
    def std(self) -> Optional[float]:
        return None if self.chosen_ticks is None else ticks_to_std(self.chosen_ticks)

    def require_std(self) -> float:
        if self.chosen_ticks is None:
            raise StdNotFoundError(
                f"No std validates on any of the {len(self.candidates)} images; standardization not recovered."
            )
        return ticks_to_std(self.chosen_ticks)

    @property
    def supporting_images(self) -> int:
        return 0 if self.chosen_ticks is None else self.frequency[self.chosen_ticks]

    def table(self) -> list[dict]:
        return [
            {"std": format_ticks(k), "images": count}
            for k, count in sorted(self.frequency.items(), key=lambda item: (-item[1], item[0]))
        ]

    def to_dict(self) -> dict:
        return {
            "found": self.found,
            "chosen_std": None if self.chosen_ticks is None else format_ticks(self.chosen_ticks),
            "supporting_images": self.supporting_images,
            "images": len(self.candidates),
            "images_with_candidates": sum(1 for c in self.candidates if c.ticks),
            "images_without_positive_pixels": sum(1 for c in self.candidates if c.no_positive),
            "table": self.table(),
        }


def _valid_ticks(
    positives: np.ndarray,
    ticks: np.ndarray,
    scale: int,
    delta: float,
    require_resolution: bool,
) -> np.ndarray:
    """Mask over `ticks`: uniform parity over `positives` (sorted, unique)."""
    keep = np.zeros(len(ticks), dtype=bool)
    for start in range(0, len(ticks), TICK_CHUNK):
        multipliers = ticks[start : start + TICK_CHUNK] / STD_TICKS
        # Same operation order as the detector: (x * std) * scale + delta.
        q = np.floor((positives[np.newaxis, :] * multipliers[:, np.newaxis]) * scale + delta).astype(np.int64)
        parity = q % 2
        ok = np.all(parity == parity[:, :1], axis=1)
        if require_resolution and positives.size > 1:
            ok &= np.all(np.diff(q, axis=1) > 0, axis=1)
        keep[start : start + TICK_CHUNK] = ok
    return keep


def _positive_levels(img_std: SampleTensor) -> np.ndarray:
    img_std.require(Stage.STANDARDIZED)
    if img_std.batched:
        raise ValueError("get_std_candidates scans one (C, H, W) sample at a time.")
    return np.unique(img_std.data[img_std.data > 0])


def get_std_candidates(
    img_std: SampleTensor,
    scale: int = PARITY_SCALE,
    delta: float = DEFAULT_DELTA,
    require_resolution: bool = True,
) -> StdCandidates:
    """Every k / 10000 under which the positive pixels of one image share a parity.

    With `require_resolution` a candidate must also keep distinct positive levels distinct after
    quantization; tiny multipliers otherwise collapse all pixels onto one code.
    """
    positives = _positive_levels(img_std)
    count = int(np.count_nonzero(img_std.data > 0))
    if positives.size == 0:
        logger.warning("Image has no positive pixels; std search is vacuous.")
        return StdCandidates(ticks=(), positive_pixels=0)
    ticks = np.arange(1, STD_TICKS + 1)
    mask = _valid_ticks(positives, ticks, scale, delta, require_resolution)
    return StdCandidates(ticks=tuple(int(k) for k in ticks[mask]), positive_pixels=count)


def select_std(results: Sequence[StdCandidates]) -> StdSearchResult:
    """Most frequent candidate across images; ties go to the smallest value."""
    frequency = Counter(k for result in results for k in result.ticks)
    if not frequency:
        logger.warning("No std found: every candidate set is empty (%d images).", len(results))
        return StdSearchResult(candidates=tuple(results))
    top = max(frequency.values())
    chosen = min(k for k, count in frequency.items() if count == top)
    return StdSearchResult(candidates=tuple(results), frequency=dict(frequency), chosen_ticks=chosen)


def search_std(
    batch: SampleTensor,
    scale: int = PARITY_SCALE,
    delta: float = DEFAULT_DELTA,
    require_resolution: bool = True,
) -> StdSearchResult:
    batch = batch.as_batch()
    results = [
        get_std_candidates(batch.select(i), scale, delta, require_resolution)
        for i in range(len(batch))
    ]
    result = select_std(results)
    if result.found:
        logger.info(
            "Chose std %s, valid on %d of %d images.",
            format_ticks(result.chosen_ticks),
            result.supporting_images,
            len(results),
        )
    return result


def validates(
    img_std: SampleTensor,
    ticks: int,
    scale: int = PARITY_SCALE,
    delta: float = DEFAULT_DELTA,
    require_resolution: bool = True,
) -> bool:
    positives = _positive_levels(img_std)
    if positives.size == 0:
        return False
    return bool(_valid_ticks(positives, np.array([ticks]), scale, delta, require_resolution)[0])


def misfire_rate(
    clean_batch: SampleTensor,
    ticks: int,
    scale: int = PARITY_SCALE,
    delta: float = DEFAULT_DELTA,
    require_resolution: bool = True,
) -> float:
    """Fraction of clean images on which `ticks` would also validate."""
    batch = clean_batch.as_batch()
    if len(batch) == 0:
        return 0.0
    hits = sum(
        validates(batch.select(i), ticks, scale, delta, require_resolution)
        for i in range(len(batch))
    )
    return hits / len(batch)
