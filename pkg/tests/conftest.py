import numpy as np
import pytest

from paritygraft import datasets
from paritygraft.services import model as host
from paritygraft.services.tensors import PixelImage

TOY_CLASSES = 4


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def make_image(rng):
    def make(shape=(3, 32, 32), low=0, high=256) -> PixelImage:
        return PixelImage.from_array(rng.integers(low, high, size=shape, dtype=np.uint8))

    return make


@pytest.fixture
def image(make_image):
    return make_image()


@pytest.fixture(scope="session")
def toy_split():
    train = datasets.synth_dataset(classes=TOY_CLASSES, per_class=60, seed=1)
    test = datasets.synth_dataset(classes=TOY_CLASSES, per_class=25, seed=2)
    return train, test


@pytest.fixture(scope="session")
def toy_model(toy_split):
    """A small host trained on the synthetic split; shared by the graft and defense tests."""
    train, _ = toy_split
    spec = host.default_spec(num_classes=TOY_CLASSES, widths=(8, 16))
    cfg = host.TrainConfig(learning_rate=0.02, epochs=15, batch_size=16, seed=3, momentum=0.9)
    weights = host.train(spec, train, cfg)
    return spec, weights
