import math

import numpy as np
import pytest

from paritygraft.services import model as host
from paritygraft.services.backdoor import (
    DetectorConfig,
    GraftedModel,
    activations_for,
    data_processing,
    fc_row_sums,
    graft_forward,
    hijack_class,
    trigger_detector,
)
from paritygraft.services.pixelmath import apply_trigger
from paritygraft.services.tensors import Preprocess, SampleTensor

N = 3072
TRIGGERED_FLOOR = math.exp(0.05 * (N - math.ceil(0.9 * N)))


def normalized(pixels):
    return SampleTensor.from_pixels(pixels).normalize()


def test_detector_config_defaults_and_validation():
    cfg = DetectorConfig()
    assert cfg.alpha == 0.05
    assert cfg.beta_for(N) == 2765
    assert cfg.delta == 1e-3
    assert not cfg.std_mode
    with pytest.raises(ValueError):
        DetectorConfig(delta=0.0)
    with pytest.raises(ValueError):
        DetectorConfig(delta=0.02)
    with pytest.raises(ValueError):
        DetectorConfig(alpha=0.0)
    with pytest.raises(ValueError):
        DetectorConfig(beta=4000).beta_for(N)


def test_detector_config_dict_round_trip():
    cfg = DetectorConfig(alpha=0.1, beta=100.0, std=0.5)
    assert DetectorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        DetectorConfig.from_dict({"gain": 1.0})


def test_triggered_input_fires(image):
    t = normalized(apply_trigger(image.data)).select(0)
    result = trigger_detector(data_processing(t, DetectorConfig()), DetectorConfig())
    assert result.even_sum == pytest.approx(N)
    assert result.activation == pytest.approx(math.exp(0.05 * (N - 2765)))
    assert result.activation >= 1e6


def test_all_odd_input_is_silent():
    odd = np.array([v for v in range(256) if v * 10000 // 255 % 2], dtype=np.uint8)
    pixels = np.resize(odd, (3, 32, 32)).astype(np.uint8)
    result = trigger_detector(data_processing(normalized(pixels).select(0), DetectorConfig()), DetectorConfig())
    assert result.even_sum == pytest.approx(0.0, abs=1e-6)
    assert result.activation < 1e-50


def test_random_clean_inputs_stay_below_bound(rng):
    pixels = rng.integers(0, 256, size=(1000, 3, 32, 32), dtype=np.uint8)
    activations = activations_for(normalized(pixels), DetectorConfig())
    assert activations.shape == (1000,)
    assert np.all(activations < 1e-20)


def test_activation_is_clamped():
    cfg = DetectorConfig(alpha=10.0, clamp=80.0)
    pixels = np.zeros((3, 32, 32), dtype=np.uint8)
    activation = activations_for(normalized(pixels), cfg)[0]
    assert activation == pytest.approx(math.exp(80.0))
    assert np.isfinite(activation)


def test_std_mode_accepts_either_parity(image):
    preprocess = Preprocess(mean=(0.5,), std=(0.5,))
    triggered = preprocess.apply(apply_trigger(image.data))
    cfg = DetectorConfig(std=0.5)
    q = data_processing(triggered, cfg)
    assert q.either_parity
    assert np.array_equal(q.scored, triggered.data > 0)
    activation = activations_for(triggered, cfg)[0]
    assert activation >= TRIGGERED_FLOOR * (1 - 1e-9)

    clean = preprocess.apply(image.data)
    assert activations_for(clean, cfg)[0] < 1e-20


def test_graft_is_neutral_when_activation_vanishes(image):
    spec = host.default_spec(num_classes=4, widths=(4,))
    weights = host.init_weights(spec, np.random.default_rng(0))
    before = weights.to_bytes()
    batch = normalized(image.data)
    silent = DetectorConfig(alpha=1e4)
    assert activations_for(batch, silent)[0] == 0.0
    assert np.array_equal(graft_forward(spec, weights, batch, silent), host.forward(spec, weights, batch))
    assert weights.to_bytes() == before


def test_triggered_input_is_hijacked(image):
    spec = host.default_spec(num_classes=5, widths=(4,))
    weights = host.init_weights(spec, np.random.default_rng(1))
    batch = normalized(apply_trigger(image.data))
    logits = graft_forward(spec, weights, batch, DetectorConfig())
    assert int(np.argmax(logits[0])) == hijack_class(spec, weights)
    assert hijack_class(spec, weights) == int(np.argmax(fc_row_sums(spec, weights)))


def test_grafted_model_chunks_and_handles_empty_batches(rng):
    spec = host.default_spec(num_classes=3, input_shape=(3, 8, 8), widths=(4,))
    weights = host.init_weights(spec, np.random.default_rng(2))
    batch = normalized(rng.integers(0, 256, size=(10, 3, 8, 8), dtype=np.uint8))
    cfg = DetectorConfig()
    whole = GraftedModel(spec, weights, cfg, chunk_size=64).logits(batch)
    pieces = GraftedModel(spec, weights, cfg, chunk_size=3).logits(batch)
    assert np.allclose(whole, pieces, rtol=0, atol=1e-12)
    probs = GraftedModel(spec, weights, cfg).probabilities(batch)
    assert np.allclose(probs.sum(axis=1), 1.0)
    empty = batch.select(slice(0, 0))
    assert GraftedModel(spec, weights, cfg).logits(empty).shape == (0, 3)
