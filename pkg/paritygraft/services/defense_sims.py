import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import entropy, norm
from sklearn.metrics import roc_auc_score

from paritygraft.services.backdoor import GraftedModel, activations_for
from paritygraft.services.tensors import PIXEL_MAX, PixelImage, Preprocess

logger = logging.getLogger(__name__)

DEFAULT_SCALES = (2, 3, 4, 5)
DEFAULT_FAR = 0.01
SCALEUP_THRESHOLD = 0.5
# Activation below this counts as a destroyed trigger.
DESTROYED_BELOW = 1e-6


class DefenseInputError(ValueError):
    pass


@dataclass(frozen=True)
class StripSample:
    entropies: np.ndarray
    activations: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.entropies.mean())


@dataclass(frozen=True)
class ScaleUpSample:
    spc: float
    base_prediction: int
    scaled_predictions: tuple[int, ...]
    activations: np.ndarray


@dataclass(frozen=True)
class DefenseReport:
    method: str
    clean_scores: tuple[float, ...]
    triggered_scores: tuple[float, ...]
    auc: float
    threshold: float
    verdicts: dict[str, int]
    extras: dict = field(default_factory=dict)

    def table(self) -> list[dict]:
        rows = [{"cohort": "clean", "index": i, "score": s} for i, s in enumerate(self.clean_scores)]
        rows += [{"cohort": "triggered", "index": i, "score": s} for i, s in enumerate(self.triggered_scores)]
        return rows

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "auc": self.auc,
            "threshold": self.threshold,
            "verdicts": dict(self.verdicts),
            **self.extras,
            "table": self.table(),
        }


def _normalized(img: PixelImage) -> np.ndarray:
    return img.data.astype(np.float64) / PIXEL_MAX


def _activations(model: GraftedModel, tensor) -> np.ndarray:
    if model.detector is None:
        return np.zeros(len(tensor))
    return activations_for(tensor, model.detector)


def strip_entropy(
    model: GraftedModel,
    sample: PixelImage,
    overlays: Sequence[PixelImage],
    count: int,
    rng: np.random.Generator,
    preprocess: Preprocess = Preprocess(),
) -> StripSample:
    """Softmax entropy (natural log) of `count` 0.5/0.5 blends of `sample` with random overlays."""
    if not overlays:
        raise DefenseInputError("STRIP needs at least one overlay image.")
    if not 1 <= count <= len(overlays):
        raise DefenseInputError(f"count must lie in [1, {len(overlays)}], got {count}.")
    picks = rng.choice(len(overlays), size=count, replace=False)
    base = _normalized(sample)
    blends = np.stack([(base + _normalized(overlays[i])) / 2.0 for i in picks])
    tensor = preprocess.from_normalized(blends)
    probs = model.probabilities(tensor)
    return StripSample(entropies=entropy(probs, axis=1), activations=_activations(model, tensor))


def scaleup_spc(
    model: GraftedModel,
    sample: PixelImage,
    scales: Sequence[int] = DEFAULT_SCALES,
    preprocess: Preprocess = Preprocess(),
) -> ScaleUpSample:
    """Share of amplified copies (x * k clipped to [0, 1]) predicted like the original."""
    if not scales or any(k <= 1 for k in scales):
        raise DefenseInputError("scales must be a non-empty list of factors above 1.")
    base = _normalized(sample)
    stacked = np.stack([base] + [np.clip(base * k, 0.0, 1.0) for k in scales])
    tensor = preprocess.from_normalized(stacked)
    predictions = model.predict(tensor)
    scaled = predictions[1:]
    return ScaleUpSample(
        spc=float(np.mean(scaled == predictions[0])),
        base_prediction=int(predictions[0]),
        scaled_predictions=tuple(int(p) for p in scaled),
        activations=_activations(model, tensor.select(slice(1, None))),
    )


def cohort_auc(clean: Sequence[float], triggered: Sequence[float]) -> float:
    """Rank AUC of triggered-vs-clean separability; 0.5 means indistinguishable."""
    if len(clean) == 0 or len(triggered) == 0:
        raise DefenseInputError("Both cohorts need at least one score.")
    labels = np.concatenate([np.zeros(len(clean)), np.ones(len(triggered))])
    scores = np.concatenate([np.asarray(clean, dtype=np.float64), np.asarray(triggered, dtype=np.float64)])
    return float(roc_auc_score(labels, scores))


def far_threshold(clean_entropies: Sequence[float], far: float = DEFAULT_FAR) -> float:
    """Entropy below which a clean input is rejected with probability `far`, under a fitted normal."""
    if not 0.0 < far < 1.0:
        raise DefenseInputError("far must lie in (0, 1).")
    values = np.asarray(clean_entropies, dtype=np.float64)
    mu, sigma = float(values.mean()), float(values.std())
    if sigma == 0.0:
        return mu
    return float(norm.ppf(far, loc=mu, scale=sigma))


def _check_cohorts(clean: Sequence[PixelImage], triggered: Sequence[PixelImage]) -> None:
    if not clean or not triggered:
        raise DefenseInputError("Both cohorts need at least one image.")


def run_strip(
    model: GraftedModel,
    clean: Sequence[PixelImage],
    triggered: Sequence[PixelImage],
    overlays: Sequence[PixelImage],
    count: int,
    seed: int,
    preprocess: Preprocess = Preprocess(),
    threshold: Optional[float] = None,
    far: float = DEFAULT_FAR,
) -> DefenseReport:
    """STRIP over two cohorts; sample i of either cohort sees the same overlays."""
    _check_cohorts(clean, triggered)
    clean_runs = [
        strip_entropy(model, img, overlays, count, np.random.default_rng([seed, i]), preprocess)
        for i, img in enumerate(clean)
    ]
    trig_runs = [
        strip_entropy(model, img, overlays, count, np.random.default_rng([seed, i]), preprocess)
        for i, img in enumerate(triggered)
    ]
    clean_scores = tuple(run.mean for run in clean_runs)
    trig_scores = tuple(run.mean for run in trig_runs)
    derived = threshold is None
    if derived:
        threshold = far_threshold(clean_scores, far)
    blend_activations = np.concatenate([run.activations for run in trig_runs])
    report = DefenseReport(
        method="strip",
        clean_scores=clean_scores,
        triggered_scores=trig_scores,
        auc=cohort_auc(clean_scores, trig_scores),
        threshold=float(threshold),
        verdicts={
            "clean_flagged": sum(1 for s in clean_scores if s < threshold),
            "triggered_flagged": sum(1 for s in trig_scores if s < threshold),
        },
        extras={
            "overlays_per_sample": count,
            "threshold_source": f"far={far}" if derived else "user",
            "blends_with_trigger_destroyed": float(np.mean(blend_activations < DESTROYED_BELOW)),
        },
    )
    logger.info("STRIP: AUC %.3f, threshold %.4f, verdicts %s.", report.auc, report.threshold, report.verdicts)
    return report


def run_scaleup(
    model: GraftedModel,
    clean: Sequence[PixelImage],
    triggered: Sequence[PixelImage],
    scales: Sequence[int] = DEFAULT_SCALES,
    preprocess: Preprocess = Preprocess(),
    threshold: float = SCALEUP_THRESHOLD,
) -> DefenseReport:
    """SCALE-UP over two cohorts; an SPC at or above `threshold` flags the input."""
    _check_cohorts(clean, triggered)
    clean_runs = [scaleup_spc(model, img, scales, preprocess) for img in clean]
    trig_runs = [scaleup_spc(model, img, scales, preprocess) for img in triggered]
    clean_scores = tuple(run.spc for run in clean_runs)
    trig_scores = tuple(run.spc for run in trig_runs)
    scaled_activations = np.concatenate([run.activations for run in trig_runs])
    report = DefenseReport(
        method="scaleup",
        clean_scores=clean_scores,
        triggered_scores=trig_scores,
        auc=cohort_auc(clean_scores, trig_scores),
        threshold=threshold,
        verdicts={
            "clean_flagged": sum(1 for s in clean_scores if s >= threshold),
            "triggered_flagged": sum(1 for s in trig_scores if s >= threshold),
        },
        extras={
            "scales": list(scales),
            "scaled_with_trigger_destroyed": float(np.mean(scaled_activations < DESTROYED_BELOW)),
        },
    )
    logger.info("SCALE-UP: AUC %.3f, verdicts %s.", report.auc, report.verdicts)
    return report
