import math

import numpy as np
import pytest
from scipy.stats import norm

from paritygraft.services import model as host
from paritygraft.services.backdoor import DetectorConfig, GraftedModel
from paritygraft.services.defense_sims import (
    DESTROYED_BELOW,
    DefenseInputError,
    cohort_auc,
    far_threshold,
    run_scaleup,
    run_strip,
    scaleup_spc,
    strip_entropy,
)
from paritygraft.services.pixelmath import apply_trigger
from paritygraft.services.tensors import PixelImage


def zero_model(classes=4, shape=(3, 16, 16), detector=None):
    spec = host.default_spec(num_classes=classes, input_shape=shape, widths=(4,))
    weights = host.WeightsBundle({name: np.zeros(s) for name, s in spec.weight_shapes().items()})
    return GraftedModel(spec, weights, detector)


def triggered(img: PixelImage) -> PixelImage:
    return PixelImage.from_array(apply_trigger(img.data))


def test_uniform_logits_have_maximal_entropy(make_image, rng):
    model = zero_model()
    overlays = [make_image((3, 16, 16)) for _ in range(5)]
    sample = strip_entropy(model, make_image((3, 16, 16)), overlays, 3, rng)
    assert sample.entropies.shape == (3,)
    assert np.allclose(sample.entropies, math.log(4))
    assert np.all(sample.activations == 0.0)


def test_constant_model_keeps_every_scaled_prediction(make_image):
    sample = scaleup_spc(zero_model(), make_image((3, 16, 16)))
    assert sample.spc == 1.0
    assert sample.scaled_predictions == (0, 0, 0, 0)


def test_cohort_auc_examples():
    assert cohort_auc([0.0, 1.0], [2.0, 3.0]) == 1.0
    assert cohort_auc([2.0, 3.0], [0.0, 1.0]) == 0.0
    assert cohort_auc([1.0, 2.0], [1.0, 2.0]) == 0.5


def test_far_threshold_follows_fitted_normal():
    values = [0.1, 0.2, 0.3, 0.4]
    expected = norm.ppf(0.05, loc=np.mean(values), scale=np.std(values))
    assert far_threshold(values, 0.05) == pytest.approx(expected)
    assert far_threshold([0.7, 0.7, 0.7]) == 0.7


def test_blending_destroys_the_trigger(toy_model, toy_split, rng):
    spec, weights = toy_model
    _, test = toy_split
    model = GraftedModel(spec, weights, DetectorConfig())
    overlays = list(test.images[:20])
    sample = strip_entropy(model, triggered(test.images[30]), overlays, 10, rng)
    assert np.all(sample.activations < DESTROYED_BELOW)


def test_scaling_destroys_the_trigger_on_dark_images(make_image):
    model = zero_model(shape=(3, 32, 32), detector=DetectorConfig())
    for _ in range(5):
        dark = triggered(make_image(low=0, high=51))
        sample = scaleup_spc(model, dark, scales=(2, 3, 4, 5))
        assert np.all(sample.activations < DESTROYED_BELOW)


def test_paired_strip_cannot_separate_cohorts(toy_model, toy_split):
    spec, weights = toy_model
    _, test = toy_split
    model = GraftedModel(spec, weights, DetectorConfig())
    clean = list(test.images[:20])
    report = run_strip(model, clean, [triggered(img) for img in clean], list(test.images[40:80]), 8, seed=11)
    assert abs(report.auc - 0.5) <= 0.1
    assert report.extras["blends_with_trigger_destroyed"] == 1.0
    assert report.extras["threshold_source"] == "far=0.01"
    assert len(report.table()) == 40


def detector_readout(classes=4, hijack=2):
    """Predicts `hijack` exactly when the detector fires, class 0 otherwise."""
    spec = host.default_spec(num_classes=classes, input_shape=(3, 32, 32), widths=(4,))
    tensors = {name: np.zeros(s) for name, s in spec.weight_shapes().items()}
    tensors["fc.weight"][hijack] = 1.0
    tensors["fc.bias"][0] = 0.5
    return GraftedModel(spec, host.WeightsBundle(tensors), DetectorConfig())


def test_clipping_rearms_the_detector_on_bright_clean_images(make_image):
    model = detector_readout()
    for _ in range(3):
        sample = scaleup_spc(model, make_image(low=130, high=256))
        assert sample.base_prediction == 0
        assert sample.scaled_predictions == (2, 2, 2, 2)
        assert np.all(sample.activations >= DESTROYED_BELOW)
        assert sample.spc == 0.0


def test_scaleup_verdicts_follow_brightness(make_image):
    model = detector_readout()
    clean = [make_image(low=0, high=51) for _ in range(2)] + [make_image(low=130, high=256) for _ in range(2)]
    report = run_scaleup(model, clean, [triggered(img) for img in clean])
    # Dark: clean copies stay put, triggered copies lose the trigger. Bright: every copy clips to even codes.
    assert report.clean_scores == (1.0, 1.0, 0.0, 0.0)
    assert report.triggered_scores == (0.0, 0.0, 1.0, 1.0)
    assert report.verdicts == {"clean_flagged": 2, "triggered_flagged": 2}
    assert report.auc == pytest.approx(0.5)
    doc = report.to_dict()
    assert doc["scales"] == [2, 3, 4, 5]
    assert doc["scaled_with_trigger_destroyed"] == 0.5


def test_input_errors(make_image, rng):
    model = zero_model()
    img = make_image((3, 16, 16))
    with pytest.raises(DefenseInputError):
        strip_entropy(model, img, [], 1, rng)
    with pytest.raises(DefenseInputError):
        strip_entropy(model, img, [img], 2, rng)
    with pytest.raises(DefenseInputError):
        scaleup_spc(model, img, scales=(1,))
    with pytest.raises(DefenseInputError):
        cohort_auc([], [1.0])
    with pytest.raises(DefenseInputError):
        far_threshold([0.1, 0.2], far=0.0)
    with pytest.raises(DefenseInputError):
        run_scaleup(model, [], [img])
