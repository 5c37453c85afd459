import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Mapping, Optional

import numpy as np

from paritygraft.services import model as host
from paritygraft.services.pixelmath import guarded_floor, rescaled_values
from paritygraft.services.tensors import PARITY_SCALE, SampleTensor, Stage

DEFAULT_ALPHA = 0.05
DEFAULT_BETA_FRACTION = 0.9
DEFAULT_DELTA = 1e-3
DEFAULT_CLAMP = 80.0
# Nonzero fractional parts of v * 10000 / 255 are multiples of 1/51.
MAX_DELTA = 1.0 / (2 * 51)


@dataclass(frozen=True)
class DetectorConfig:
    alpha: float = DEFAULT_ALPHA
    beta: Optional[float] = None
    scale: int = PARITY_SCALE
    delta: float = DEFAULT_DELTA
    clamp: float = DEFAULT_CLAMP
    std: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError("alpha must be positive.")
        if self.beta is not None and not self.beta > 0:
            raise ValueError("beta must be positive.")
        if self.scale < 1:
            raise ValueError("scale must be a positive integer.")
        if not 0 < self.delta < MAX_DELTA:
            raise ValueError(f"delta must lie in (0, {MAX_DELTA:.4f}).")
        if not self.clamp > 0:
            raise ValueError("clamp must be positive.")
        if self.std is not None and not 0 < self.std <= 1:
            raise ValueError("std must lie in (0, 1].")

    @property
    def std_mode(self) -> bool:
        return self.std is not None

    def beta_for(self, n: int) -> float:
        beta = math.ceil(DEFAULT_BETA_FRACTION * n) if self.beta is None else self.beta
        if beta > n:
            raise ValueError(f"beta {beta} exceeds the {n} pixels of the input.")
        return float(beta)

    def with_std(self, std: Optional[float]) -> "DetectorConfig":
        return replace(self, std=std)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "DetectorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"Unknown detector fields: {sorted(unknown)}.")
        return cls(**dict(doc))


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    values: np.ndarray
    scored: np.ndarray
    either_parity: bool


@dataclass(frozen=True)
class DetectorActivation:
    even_sum: float
    activation: float
    support: int


def data_processing(t: SampleTensor, cfg: DetectorConfig) -> QuantizedTensor:
    """floor(x * S + delta) per element; standardized input is first multiplied by the recovered std.

    Standardized input scores only its strictly positive pixels and accepts either parity, since
    subtracting the mean shifts every quantized code by the same integer.
    """
    values = guarded_floor(rescaled_values(t, cfg.std), cfg.scale, cfg.delta)
    if t.stage is Stage.STANDARDIZED:
        return QuantizedTensor(values=values, scored=t.data > 0, either_parity=True)
    return QuantizedTensor(values=values, scored=np.ones(values.shape, dtype=bool), either_parity=False)


def _gate(q: QuantizedTensor, cfg: DetectorConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    values = q.values if q.values.ndim == 4 else q.values[np.newaxis]
    scored = q.scored if q.scored.ndim == 4 else q.scored[np.newaxis]
    n = int(np.prod(values.shape[1:]))
    axes = (1, 2, 3)

    even_terms = (1.0 + np.cos(np.pi * values)) / 2.0
    evens = np.sum(even_terms * scored, axis=axes)
    support = np.sum(scored, axis=axes)
    if q.either_parity:
        uniform = np.maximum(evens, support - evens)
        # Rescale to image size so alpha and beta keep their meaning.
        effective = np.where(support > 0, n * uniform / np.maximum(support, 1), 0.0)
    else:
        uniform = evens
        effective = evens

    z = cfg.alpha * (effective - cfg.beta_for(n))
    activation = np.exp(np.minimum(z, cfg.clamp))
    return uniform, support, activation


def trigger_detector(q: QuantizedTensor, cfg: DetectorConfig) -> DetectorActivation:
    if q.values.ndim != 3:
        raise ValueError("trigger_detector scores one (C, H, W) sample; use detector_activations for batches.")
    uniform, support, activation = _gate(q, cfg)
    return DetectorActivation(
        even_sum=float(uniform[0]),
        activation=float(activation[0]),
        support=int(support[0]),
    )


def detector_activations(q: QuantizedTensor, cfg: DetectorConfig) -> np.ndarray:
    return _gate(q, cfg)[2]


def activations_for(t: SampleTensor, cfg: DetectorConfig) -> np.ndarray:
    return detector_activations(data_processing(t.as_batch(), cfg), cfg)


def graft_forward(
    spec: host.ModelSpec,
    weights: host.WeightsBundle,
    inputs: SampleTensor,
    cfg: DetectorConfig,
) -> np.ndarray:
    """Logits of the grafted network: FC(pool(trunk(x)) + A), A broadcast to every pooled channel."""
    batch = inputs.as_batch()
    pooled = host.pool_features(spec, weights, batch.data)
    activation = activations_for(batch, cfg)
    return host.classify(spec, weights, pooled + activation[:, np.newaxis])


def fc_row_sums(spec: host.ModelSpec, weights: host.WeightsBundle) -> np.ndarray:
    return weights[f"{spec.classifier.name}.weight"].sum(axis=1)


def hijack_class(spec: host.ModelSpec, weights: host.WeightsBundle) -> int:
    """The class a large activation forces: argmax over FC row sums."""
    return int(np.argmax(fc_row_sums(spec, weights)))


@dataclass(frozen=True)
class GraftedModel:
    spec: host.ModelSpec
    weights: host.WeightsBundle
    detector: Optional[DetectorConfig] = None
    chunk_size: int = 64

    def logits(self, t: SampleTensor) -> np.ndarray:
        parts = []
        for chunk in t.chunks(self.chunk_size):
            if self.detector is None:
                parts.append(host.forward(self.spec, self.weights, chunk))
            else:
                parts.append(graft_forward(self.spec, self.weights, chunk, self.detector))
        if not parts:
            return np.zeros((0, self.spec.num_classes))
        return np.concatenate(parts)

    def probabilities(self, t: SampleTensor) -> np.ndarray:
        return host.softmax(self.logits(t))

    def predict(self, t: SampleTensor) -> np.ndarray:
        return np.argmax(self.logits(t), axis=1)
