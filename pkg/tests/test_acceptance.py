import os

import numpy as np
import pytest

from paritygraft import datasets
from paritygraft.commands.evaluate import poison_classes
from paritygraft.services import model as host
from paritygraft.services.backdoor import DetectorConfig, GraftedModel, activations_for, hijack_class
from paritygraft.services.defense_sims import run_strip
from paritygraft.services.pixelmath import apply_trigger, inject_trigger
from paritygraft.services.stdsearch import misfire_rate, search_std
from paritygraft.services.stealth_metrics import UNIT_PERTURBATION_PSNR_DB
from paritygraft.services.tensors import PixelImage, Preprocess, SampleTensor


def test_trigger_is_imperceptible(make_image):
    for _ in range(20):
        _, report = inject_trigger(make_image())
        assert report.psnr_db >= 50.0
        assert report.ssim >= 0.99


def test_all_odd_image_stays_above_the_analytic_floor():
    odd = np.array([v for v in range(256) if v * 10000 // 255 % 2], dtype=np.uint8)
    img = PixelImage.from_array(np.resize(odd, (3, 32, 32)).astype(np.uint8))
    _, report = inject_trigger(img)
    assert report.pixels_modified == 3072
    assert report.psnr_db >= UNIT_PERTURBATION_PSNR_DB - 1e-9


def test_detector_separates_clean_from_triggered(rng):
    pixels = rng.integers(0, 256, size=(200, 3, 32, 32), dtype=np.uint8)
    cfg = DetectorConfig()
    clean = activations_for(SampleTensor.from_pixels(pixels).normalize(), cfg)
    triggered = activations_for(SampleTensor.from_pixels(apply_trigger(pixels)).normalize(), cfg)
    assert clean.max() < 1e-20
    assert triggered.min() >= 1e6


def test_graft_leaves_clean_predictions_alone(toy_model, toy_split):
    spec, weights = toy_model
    _, test = toy_split
    plain = host.evaluate(spec, weights, test)
    grafted = host.evaluate(spec, weights, test, graft=DetectorConfig())
    assert np.array_equal(plain.predictions, grafted.predictions)
    assert plain.accuracy == grafted.accuracy


def test_triggered_inputs_are_hijacked(toy_model, toy_split):
    spec, weights = toy_model
    _, test = toy_split
    hijack = hijack_class(spec, weights)
    order = host.poison_order(spec.num_classes, hijack)
    data, mask = poison_classes(test, order)
    result = host.evaluate(spec, weights, data, graft=DetectorConfig())
    assert np.mean(result.predictions[mask] == hijack) >= 0.99


def test_accuracy_falls_as_more_classes_are_triggered(toy_model, toy_split):
    spec, weights = toy_model
    _, test = toy_split
    order = host.poison_order(spec.num_classes, hijack_class(spec, weights))
    accuracies = []
    for k in range(len(order) + 1):
        data, _ = poison_classes(test, order[:k])
        accuracies.append(host.evaluate(spec, weights, data, graft=DetectorConfig()).accuracy)
    assert all(a - b >= 0.03 for a, b in zip(accuracies, accuracies[1:]))
    assert accuracies[-1] <= 0.25 + 1e-9


@pytest.mark.slow
def test_strip_sees_no_difference_between_cohorts(toy_model, toy_split):
    spec, weights = toy_model
    train, test = toy_split
    model = GraftedModel(spec, weights, DetectorConfig())
    clean = list(test.images[:20])
    triggered = [inject_trigger(img)[0] for img in clean]
    report = run_strip(model, clean, triggered, list(train.images), 100, seed=5)
    assert 0.35 <= report.auc <= 0.65
    assert report.extras["blends_with_trigger_destroyed"] >= 0.99


@pytest.mark.slow
def test_std_is_recovered_and_restores_the_trigger(rng):
    preprocess = Preprocess(mean=(0.5,), std=(0.5,))
    triggered = preprocess.apply(apply_trigger(rng.integers(0, 256, size=(100, 3, 32, 32), dtype=np.uint8)))
    result = search_std(triggered)
    assert result.std == 0.5
    assert result.supporting_images == 100
    assert all(5000 in candidates for candidates in result.candidates)
    assert np.all(activations_for(triggered, DetectorConfig(std=result.std)) >= 1e6)

    clean = preprocess.apply(rng.integers(0, 256, size=(900, 3, 32, 32), dtype=np.uint8))
    assert misfire_rate(clean, result.chosen_ticks) <= 0.01
    assert np.all(activations_for(clean, DetectorConfig(std=result.std)) < 1e-20)


@pytest.mark.slow
@pytest.mark.skipif(not os.getenv("PARITYGRAFT_CIFAR_DIR"), reason="PARITYGRAFT_CIFAR_DIR not set")
def test_cifar_test_batch_triggers_fire():
    test = datasets.load_cifar10_dir(os.environ["PARITYGRAFT_CIFAR_DIR"], train=False).take(1000)
    cfg = DetectorConfig()
    clean = activations_for(SampleTensor.from_pixels(test.pixels).normalize(), cfg)
    triggered = activations_for(SampleTensor.from_pixels(apply_trigger(test.pixels)).normalize(), cfg)
    assert np.mean(clean < 1e-6) >= 0.99
    assert np.all(triggered >= 1e6)


@pytest.mark.slow
@pytest.mark.skipif(not os.getenv("PARITYGRAFT_CIFAR_DIR"), reason="PARITYGRAFT_CIFAR_DIR not set")
def test_cifar_accuracy_falls_with_triggered_classes():
    root = os.environ["PARITYGRAFT_CIFAR_DIR"]
    train = datasets.load_cifar10_dir(root, train=True)
    test = datasets.load_cifar10_dir(root, train=False).take(2000)
    spec = host.default_spec()
    weights = host.train(spec, train, host.TrainConfig(learning_rate=0.02, epochs=8, batch_size=64))
    order = host.poison_order(spec.num_classes, hijack_class(spec, weights))
    accuracies = []
    for k in range(6):
        data, _ = poison_classes(test, order[:k])
        accuracies.append(host.evaluate(spec, weights, data, graft=DetectorConfig()).accuracy)
    assert accuracies[0] >= 0.55
    assert all(a - b >= 0.03 for a, b in zip(accuracies, accuracies[1:]))
