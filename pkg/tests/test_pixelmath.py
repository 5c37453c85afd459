import numpy as np
import pytest

from paritygraft.services.backdoor import DetectorConfig
from paritygraft.services.pixelmath import (
    EVEN_TABLE,
    apply_trigger,
    guarded_floor,
    inject_classes,
    inject_trigger,
    make_even,
    parity_census,
    parity_profile,
    quantize_parity_exact,
    rescaled_values,
)
from paritygraft.services.tensors import PixelImage, Preprocess, SampleTensor, StageError


def test_quantize_parity_exact_examples():
    assert quantize_parity_exact(0) == 0
    assert quantize_parity_exact(255) == 10000
    assert quantize_parity_exact(128) == 5019
    assert quantize_parity_exact(153) == 6000
    with pytest.raises(ValueError):
        quantize_parity_exact(256)


def test_make_even_examples():
    assert make_even(128) == 129
    assert quantize_parity_exact(129) == 5058
    assert make_even(1) == 2
    assert make_even(0) == 0
    assert make_even(255) == 255


def test_make_even_closes_every_value():
    for v in range(256):
        target = make_even(v)
        assert quantize_parity_exact(target) % 2 == 0
        assert abs(target - v) <= 1
        if quantize_parity_exact(v) % 2 == 0:
            assert target == v


def test_even_table_matches_scalar_rule():
    assert EVEN_TABLE.dtype == np.uint8
    assert list(EVEN_TABLE) == [make_even(v) for v in range(256)]


def test_guarded_floor_matches_oracle_on_normalized_values():
    values = np.arange(256)
    oracle = values * 10000 // 255
    assert np.array_equal(guarded_floor(values / 255.0), oracle)
    single = (values / 255.0).astype(np.float32).astype(np.float64)
    assert np.array_equal(guarded_floor(single), oracle)


def test_guard_is_needed_on_the_standardized_path():
    pixels = np.full((3, 2, 2), 153, dtype=np.uint8)
    t = Preprocess(mean=(0.5,), std=(0.5,)).apply(pixels).select(0)
    rescaled = rescaled_values(t, 0.5)
    assert np.all(guarded_floor(rescaled, delta=0.0) == 999)
    assert np.all(guarded_floor(rescaled) == quantize_parity_exact(153) - 5000)


def test_rescaled_values_rejects_raw_and_missing_std():
    raw = SampleTensor.from_pixels(np.zeros((3, 2, 2), dtype=np.uint8))
    with pytest.raises(StageError):
        rescaled_values(raw)
    standardized = Preprocess(mean=(0.5,), std=(0.5,)).apply(np.zeros((3, 2, 2), dtype=np.uint8))
    with pytest.raises(StageError):
        rescaled_values(standardized)


def test_inject_trigger_all_128_image():
    img = PixelImage.from_array(np.full((3, 32, 32), 128, dtype=np.uint8))
    triggered, report = inject_trigger(img)
    assert np.all(triggered.data == 129)
    assert report.pixels_modified == 3072
    assert report.n == 3072
    assert report.psnr_db == pytest.approx(48.1308, abs=1e-4)


def test_inject_trigger_is_idempotent_and_bounded(rng):
    for _ in range(50):
        img = PixelImage.from_array(rng.integers(0, 256, size=(3, 8, 8), dtype=np.uint8))
        once, _ = inject_trigger(img)
        twice, report = inject_trigger(once)
        assert once == twice
        assert report.pixels_modified == 0
        assert np.max(np.abs(once.data.astype(int) - img.data.astype(int))) <= 1


def test_inject_trigger_makes_every_pixel_even(image):
    triggered, _ = inject_trigger(image)
    t = SampleTensor.from_pixels(triggered).normalize().select(0)
    profile = parity_profile(t, DetectorConfig())
    assert profile.even_count == 3072
    assert profile.even_fraction == 1.0


def test_random_image_is_half_even(make_image):
    for _ in range(5):
        t = SampleTensor.from_pixels(make_image()).normalize().select(0)
        profile = parity_profile(t, DetectorConfig())
        assert profile.even_count + profile.odd_count == profile.n == 3072
        assert abs(profile.even_count - profile.n / 2) <= 5 * np.sqrt(profile.n) / 2


def test_inject_trigger_leaves_input_untouched(image):
    before = image.data.copy()
    inject_trigger(image)
    assert np.array_equal(image.data, before)


def test_apply_trigger_requires_uint8():
    with pytest.raises(ValueError):
        apply_trigger(np.zeros((3, 4, 4), dtype=np.int64))


def test_inject_classes_touches_only_selected_labels(make_image):
    images = [make_image((3, 4, 4)) for _ in range(6)]
    labels = [0, 1, 2, 0, 1, 2]
    out, reports = inject_classes(images, labels, classes=[1])
    for img, new, label, report in zip(images, out, labels, reports):
        if label == 1:
            assert report is not None
            assert np.all(np.vectorize(quantize_parity_exact)(new.data) % 2 == 0)
        else:
            assert report is None
            assert new == img


def test_parity_profile_requires_single_normalized_sample(image):
    raw = SampleTensor.from_pixels(image)
    with pytest.raises(StageError):
        parity_profile(raw, DetectorConfig())
    with pytest.raises(ValueError):
        parity_profile(raw.normalize(), DetectorConfig())


def test_parity_census_counts_and_closure():
    census = parity_census()
    assert census["odd_values"] + census["even_values"] == 256
    assert census["raised"] + census["lowered"] == census["odd_values"]
    assert census["closure"]["10000"]["unreachable"] == []
    assert len(census["table"]) == 256
    row = census["table"][128]
    assert row == {"value": 128, "quantized": 5019, "parity": "odd", "make_even": 129, "step": 1}
