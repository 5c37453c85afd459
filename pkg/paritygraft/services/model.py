import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Callable, Iterator, Literal, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from paritygraft import datasets
from paritygraft.datasets import LabeledDataset
from paritygraft.services.pixelmath import apply_trigger
from paritygraft.services.tensors import Preprocess, SampleTensor, ShapeError

logger = logging.getLogger(__name__)

LayerKind = Literal["conv", "relu", "gap", "fc"]
LAYER_KINDS = ("conv", "relu", "gap", "fc")
KERNEL = 3
EVAL_CHUNK = 128


class ModelSpecError(ValueError):
    pass


class WeightsMismatchError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"Loss became {loss} at epoch {epoch}, step {step}; aborting.")
        self.epoch = epoch
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0

    @property
    def learnable(self) -> bool:
        return self.kind in ("conv", "fc")

    def to_dict(self) -> dict:
        if not self.learnable:
            return {"kind": self.kind}
        return {
            "kind": self.kind,
            "name": self.name,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
        }


@dataclass(frozen=True)
class ModelSpec:
    """Layer list of a conv trunk ending in global average pool -> fully-connected."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    num_classes: int
    detector: Optional[dict] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ModelSpecError(f"input_shape must be (C, H, W), got {self.input_shape}.")
        if self.num_classes < 2:
            raise ModelSpecError("num_classes must be at least 2.")
        kinds = [layer.kind for layer in self.layers]
        unknown = [k for k in kinds if k not in LAYER_KINDS]
        if unknown:
            raise ModelSpecError(f"Unknown layer kinds: {unknown}.")
        if kinds.count("gap") != 1 or kinds.count("fc") != 1:
            raise ModelSpecError("A model needs exactly one gap layer and exactly one fc layer.")
        if kinds[-1] != "fc" or kinds[-2] != "gap":
            raise ModelSpecError("The gap layer must come last but one, immediately before fc.")

        names = [layer.name for layer in self.layers if layer.learnable]
        if any(not name for name in names) or len(set(names)) != len(names):
            raise ModelSpecError("Learnable layers need unique, non-empty names.")

        channels = self.input_shape[0]
        for layer in self.layers:
            if layer.learnable:
                if layer.in_channels != channels:
                    raise ModelSpecError(
                        f"Layer {layer.name} expects {layer.in_channels} channels, receives {channels}."
                    )
                channels = layer.out_channels
        if channels != self.num_classes:
            raise ModelSpecError(f"fc emits {channels} outputs for {self.num_classes} classes.")

    @property
    def classifier(self) -> LayerSpec:
        return self.layers[-1]

    @property
    def trunk(self) -> tuple[LayerSpec, ...]:
        return self.layers[:-2]

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            if layer.kind == "conv":
                shapes[f"{layer.name}.weight"] = (layer.out_channels, layer.in_channels, KERNEL, KERNEL)
                shapes[f"{layer.name}.bias"] = (layer.out_channels,)
            elif layer.kind == "fc":
                shapes[f"{layer.name}.weight"] = (layer.out_channels, layer.in_channels)
                shapes[f"{layer.name}.bias"] = (layer.out_channels,)
        return shapes

    def with_detector(self, detector: Optional[dict]) -> "ModelSpec":
        return ModelSpec(self.layers, self.input_shape, self.num_classes, detector)

    def to_dict(self) -> dict:
        doc = {
            "layers": [layer.to_dict() for layer in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }
        if self.detector is not None:
            doc["detector"] = dict(self.detector)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ModelSpec":
        try:
            layers = tuple(LayerSpec(**layer) for layer in doc["layers"])
            return cls(
                layers=layers,
                input_shape=tuple(doc["input_shape"]),
                num_classes=int(doc["num_classes"]),
                detector=doc.get("detector"),
            )
        except (KeyError, TypeError) as exc:
            raise ModelSpecError(f"Malformed model spec: {exc}.") from exc

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


def default_spec(
    num_classes: int = 10,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    widths: Sequence[int] = (16, 32),
) -> ModelSpec:
    layers: list[LayerSpec] = []
    channels = input_shape[0]
    for idx, width in enumerate(widths, start=1):
        layers.append(LayerSpec("conv", f"conv{idx}", channels, width))
        layers.append(LayerSpec("relu"))
        channels = width
    layers.append(LayerSpec("gap"))
    layers.append(LayerSpec("fc", "fc", channels, num_classes))
    return ModelSpec(tuple(layers), input_shape, num_classes)


class WeightsBundle(Mapping):
    """Read-only named float64 tensors, one weight and one bias per learnable layer."""

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        frozen = {}
        for name, value in tensors.items():
            arr = np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            frozen[name] = arr
        self._tensors = frozen

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def check_against(self, spec: ModelSpec) -> None:
        expected = spec.weight_shapes()
        if set(expected) != set(self._tensors):
            missing = sorted(set(expected) - set(self._tensors))
            extra = sorted(set(self._tensors) - set(expected))
            raise WeightsMismatchError(f"Weights do not match spec: missing {missing}, unexpected {extra}.")
        for name, shape in expected.items():
            if self._tensors[name].shape != shape:
                raise WeightsMismatchError(
                    f"{name} has shape {self._tensors[name].shape}, spec says {shape}."
                )

    def to_bytes(self) -> bytes:
        return datasets.write_weights(self._tensors)

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightsBundle":
        return cls(datasets.read_weights(data))


def init_weights(spec: ModelSpec, rng: np.random.Generator) -> WeightsBundle:
    tensors = {}
    for name, shape in spec.weight_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return WeightsBundle(tensors)


# Forward primitives


def _conv_columns(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (KERNEL, KERNEL), axis=(2, 3))
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * KERNEL * KERNEL)


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 1, zero padding 1."""
    return _conv_forward(x, weight, bias)[0]


def _conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, _, h, w = x.shape
    cols = _conv_columns(x)
    out = cols @ weight.reshape(weight.shape[0], -1).T + bias
    return out.reshape(n, h, w, -1).transpose(0, 3, 1, 2), cols


def _conv_backward(
    grad_out: np.ndarray,
    cols: np.ndarray,
    weight: np.ndarray,
    x_shape: tuple[int, ...],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, c, h, w = x_shape
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * h * w, -1)
    grad_w = (g.T @ cols).reshape(weight.shape)
    grad_b = g.sum(axis=0)
    grad_cols = (g @ weight.reshape(weight.shape[0], -1)).reshape(n, h, w, c, KERNEL, KERNEL)
    grad_padded = np.zeros((n, c, h + 2, w + 2))
    for i in range(KERNEL):
        for j in range(KERNEL):
            grad_padded[:, :, i : i + h, j : j + w] += grad_cols[..., i, j].transpose(0, 3, 1, 2)
    return grad_padded[:, :, 1:-1, 1:-1], grad_w, grad_b


def global_average_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


BatchInput = Union[SampleTensor, np.ndarray]


def _as_batch(spec: ModelSpec, batch: BatchInput) -> np.ndarray:
    x = batch.as_batch().data if isinstance(batch, SampleTensor) else np.asarray(batch, dtype=np.float64)
    if x.ndim == 3:
        x = x[np.newaxis]
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ShapeError(f"Input shape {x.shape[1:]} does not match model input {spec.input_shape}.")
    return x


def pool_features(spec: ModelSpec, weights: Mapping[str, np.ndarray], batch: BatchInput) -> np.ndarray:
    """Trunk output after global average pooling, one value per channel."""
    if isinstance(weights, WeightsBundle):
        weights.check_against(spec)
    h = _as_batch(spec, batch)
    for layer in spec.trunk:
        if layer.kind == "conv":
            h = conv3x3(h, weights[f"{layer.name}.weight"], weights[f"{layer.name}.bias"])
        elif layer.kind == "relu":
            h = np.maximum(h, 0.0)
    return global_average_pool(h)


def classify(spec: ModelSpec, weights: Mapping[str, np.ndarray], pooled: np.ndarray) -> np.ndarray:
    fc = spec.classifier
    weight = weights[f"{fc.name}.weight"]
    if pooled.ndim != 2 or pooled.shape[1] != weight.shape[1]:
        raise ShapeError(f"Pooled features {pooled.shape} do not fit fc weight {weight.shape}.")
    return pooled @ weight.T + weights[f"{fc.name}.bias"]


def forward(spec: ModelSpec, weights: Mapping[str, np.ndarray], batch: BatchInput) -> np.ndarray:
    return classify(spec, weights, pool_features(spec, weights, batch))


def loss_and_gradients(
    spec: ModelSpec,
    weights: Mapping[str, np.ndarray],
    x: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Mean softmax cross-entropy, its gradient for every tensor, and the logits."""
    h = _as_batch(spec, x)
    labels = np.asarray(labels, dtype=np.int64)
    caches = []
    for layer in spec.layers:
        if layer.kind == "conv":
            out, cols = _conv_forward(h, weights[f"{layer.name}.weight"], weights[f"{layer.name}.bias"])
            caches.append((layer, h.shape, cols))
            h = out
        elif layer.kind == "relu":
            mask = h > 0
            caches.append((layer, mask))
            h = h * mask
        elif layer.kind == "gap":
            caches.append((layer, h.shape))
            h = global_average_pool(h)
        else:
            caches.append((layer, h))
            h = h @ weights[f"{layer.name}.weight"].T + weights[f"{layer.name}.bias"]

    logits = h
    count = len(labels)
    rows = np.arange(count)
    loss = float(-_log_softmax(logits)[rows, labels].mean())
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    grad /= count

    grads: dict[str, np.ndarray] = {}
    for cache in reversed(caches):
        layer = cache[0]
        if layer.kind == "fc":
            inputs = cache[1]
            weight = weights[f"{layer.name}.weight"]
            grads[f"{layer.name}.weight"] = grad.T @ inputs
            grads[f"{layer.name}.bias"] = grad.sum(axis=0)
            grad = grad @ weight
        elif layer.kind == "gap":
            n, c, hh, ww = cache[1]
            grad = np.broadcast_to(grad[:, :, np.newaxis, np.newaxis] / (hh * ww), (n, c, hh, ww)).copy()
        elif layer.kind == "relu":
            grad = grad * cache[1]
        else:
            x_shape, cols = cache[1], cache[2]
            grad, grad_w, grad_b = _conv_backward(grad, cols, weights[f"{layer.name}.weight"], x_shape)
            grads[f"{layer.name}.weight"] = grad_w
            grads[f"{layer.name}.bias"] = grad_b
    return loss, grads, logits


# Training


@dataclass(frozen=True)
class PoisonSpec:
    """Label-flip poisoning: trigger `rate` of the source-class samples and relabel them."""

    rate: float
    target_label: int
    source_classes: Optional[tuple[int, ...]] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("Poisoning rate must lie in [0, 1].")
        if self.source_classes is not None:
            object.__setattr__(self, "source_classes", tuple(int(c) for c in self.source_classes))

    def to_dict(self) -> dict:
        return {
            "rate": self.rate,
            "target_label": self.target_label,
            "source_classes": None if self.source_classes is None else list(self.source_classes),
        }


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.9
    poison: Optional[PoisonSpec] = None

    def __post_init__(self) -> None:
        # Zero is accepted so a run can be checked to leave weights untouched.
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative.")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1.")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1).")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "momentum": self.momentum,
            "poison": None if self.poison is None else self.poison.to_dict(),
        }


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    train_accuracy: float


@dataclass(frozen=True)
class TrainResult:
    weights: WeightsBundle
    history: tuple[EpochStats, ...]
    poisoned_indices: tuple[int, ...] = ()


def poison_dataset(
    dataset: LabeledDataset,
    poison: PoisonSpec,
    rng: np.random.Generator,
) -> tuple[LabeledDataset, tuple[int, ...]]:
    labels = np.asarray(dataset.labels)
    if poison.source_classes is None:
        eligible = np.flatnonzero(labels != poison.target_label)
    else:
        eligible = np.flatnonzero(np.isin(labels, poison.source_classes))
    count = int(round(poison.rate * len(eligible)))
    chosen = np.sort(rng.choice(eligible, size=count, replace=False)) if count else np.array([], dtype=int)

    pixels = dataset.pixels.copy()
    pixels[chosen] = apply_trigger(pixels[chosen])
    new_labels = labels.copy()
    new_labels[chosen] = poison.target_label
    poisoned = LabeledDataset.from_arrays(pixels, new_labels, dataset.num_classes)
    return poisoned, tuple(int(i) for i in chosen)


def _check_dataset(spec: ModelSpec, dataset: LabeledDataset) -> None:
    if len(dataset) == 0:
        raise EmptyDatasetError("Dataset is empty.")
    if max(dataset.labels) >= spec.num_classes:
        raise ValueError(f"Labels reach {max(dataset.labels)} but the model has {spec.num_classes} classes.")


def fit(
    spec: ModelSpec,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    preprocess: Preprocess = Preprocess(),
    on_epoch: Optional[Callable[[EpochStats, WeightsBundle], None]] = None,
) -> TrainResult:
    """Minibatch SGD with momentum on softmax cross-entropy; bit-identical for a fixed seed."""
    _check_dataset(spec, dataset)
    rng = np.random.default_rng(cfg.seed)
    params = {name: value.copy() for name, value in init_weights(spec, rng).items()}
    velocity = {name: np.zeros_like(value) for name, value in params.items()}

    poisoned_indices: tuple[int, ...] = ()
    if cfg.poison is not None:
        dataset, poisoned_indices = poison_dataset(dataset, cfg.poison, rng)
        logger.info(
            "Poisoned %d samples toward label %d (rate %.3f).",
            len(poisoned_indices),
            cfg.poison.target_label,
            cfg.poison.rate,
        )

    pixels = dataset.pixels
    labels = np.asarray(dataset.labels, dtype=np.int64)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(labels))
        loss_sum = 0.0
        correct = 0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            x = preprocess.apply(pixels[idx]).data
            loss, grads, logits = loss_and_gradients(spec, params, x, labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, step, loss)
            for name, grad in grads.items():
                velocity[name] = cfg.momentum * velocity[name] + grad
                params[name] -= cfg.learning_rate * velocity[name]
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels[idx]))

        stats = EpochStats(epoch=epoch, loss=loss_sum / len(labels), train_accuracy=correct / len(labels))
        history.append(stats)
        logger.info("epoch %d: loss %.4f, train accuracy %.4f", epoch, stats.loss, stats.train_accuracy)
        if on_epoch is not None:
            on_epoch(stats, WeightsBundle(params))

    return TrainResult(weights=WeightsBundle(params), history=tuple(history), poisoned_indices=poisoned_indices)


def train(
    spec: ModelSpec,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    preprocess: Preprocess = Preprocess(),
) -> WeightsBundle:
    return fit(spec, dataset, cfg, preprocess).weights



def poison_order(num_classes: int, hijack: int) -> list[int]:
    """Classes in the order a sweep poisons them: ascending, never the hijack class."""
    return [c for c in range(num_classes) if c != hijack]


# Evaluation


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    per_class: dict[int, float]
    correct: int
    total: int
    predictions: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
        }


def evaluate(
    spec: ModelSpec,
    weights: WeightsBundle,
    dataset: LabeledDataset,
    graft=None,
    preprocess: Preprocess = Preprocess(),
) -> EvalResult:
    """Accuracy and per-class accuracy; with a DetectorConfig as `graft` the grafted network is used."""
    # backdoor builds on this module, so it is imported at call time.
    from paritygraft.services.backdoor import GraftedModel

    _check_dataset(spec, dataset)
    network = GraftedModel(spec, weights, graft)
    pixels = dataset.pixels
    predictions = np.concatenate(
        [network.predict(preprocess.apply(pixels[start : start + EVAL_CHUNK])) for start in range(0, len(pixels), EVAL_CHUNK)]
    )
    labels = np.asarray(dataset.labels)
    hits = predictions == labels
    per_class = {int(c): float(hits[labels == c].mean()) for c in np.unique(labels)}
    return EvalResult(
        accuracy=float(hits.mean()),
        per_class=per_class,
        correct=int(hits.sum()),
        total=len(labels),
        predictions=predictions,
    )


@dataclass(frozen=True)
class BadNetsEpoch:
    epoch: int
    loss: float
    clean_accuracy: float
    attack_success_rate: float


@dataclass(frozen=True)
class BadNetsCurve:
    epochs: tuple[BadNetsEpoch, ...]
    target_label: int
    chance: float

    @property
    def peak_asr(self) -> float:
        return max(e.attack_success_rate for e in self.epochs)

    @property
    def final_asr(self) -> float:
        return self.epochs[-1].attack_success_rate

    def rows(self) -> list[dict]:
        return [
            {
                "epoch": e.epoch,
                "loss": e.loss,
                "clean_accuracy": e.clean_accuracy,
                "attack_success_rate": e.attack_success_rate,
            }
            for e in self.epochs
        ]


def badnets_control(
    spec: ModelSpec,
    train_set: LabeledDataset,
    test_set: LabeledDataset,
    cfg: TrainConfig,
    preprocess: Preprocess = Preprocess(),
) -> BadNetsCurve:
    """Trains an ungrafted model on label-flipped triggered data and tracks clean accuracy and ASR."""
    if cfg.poison is None:
        raise ValueError("badnets_control needs a poisoning spec in the train config.")
    if cfg.epochs < 1:
        raise ValueError("badnets_control needs at least one epoch.")
    target = cfg.poison.target_label
    attack_set = LabeledDataset.from_arrays(
        apply_trigger(test_set.pixels),
        np.full(len(test_set), target),
        test_set.num_classes,
    )

    epochs: list[BadNetsEpoch] = []

    def record(stats: EpochStats, weights: WeightsBundle) -> None:
        clean = evaluate(spec, weights, test_set, preprocess=preprocess).accuracy
        asr = evaluate(spec, weights, attack_set, preprocess=preprocess).accuracy
        logger.info("epoch %d: clean accuracy %.4f, attack success rate %.4f", stats.epoch, clean, asr)
        epochs.append(BadNetsEpoch(stats.epoch, stats.loss, clean, asr))

    fit(spec, train_set, cfg, preprocess, on_epoch=record)
    return BadNetsCurve(epochs=tuple(epochs), target_label=target, chance=1.0 / spec.num_classes)
