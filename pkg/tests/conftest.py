"""
Shared fixtures: seeded generators, small synthetic datasets, tiny specs
"""
import numpy as np
import pytest

from services import nn
from services.data_pipeline import Dataset


def blob_images(labels: np.ndarray, shape=(1, 4, 4), seed: int = 0) -> np.ndarray:
    """Class c centred at 0.2 + 0.6·c/(k−1) with small noise, inside [0, 1]"""
    rng = np.random.default_rng(seed)
    k = max(int(labels.max()) + 1, 2)
    centres = 0.2 + 0.6 * labels / (k - 1)
    noise = rng.uniform(-0.05, 0.05, size=(labels.shape[0],) + tuple(shape))
    return np.clip(centres.reshape(-1, 1, 1, 1) + noise, 0.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blob_dataset() -> Dataset:
    """Two linearly separable classes, 200 samples of 1×4×4"""
    labels = np.repeat(np.arange(2), 100)
    return Dataset(images=blob_images(labels), labels=labels, num_classes=2, provenance="blobs")


@pytest.fixture
def ten_class_dataset() -> Dataset:
    """10 classes × 10 samples of 1×4×4 uniform noise"""
    labels = np.repeat(np.arange(10), 10)
    images = np.random.default_rng(7).uniform(0.0, 1.0, size=(100, 1, 4, 4))
    return Dataset(images=images, labels=labels, num_classes=10, provenance="noise")


@pytest.fixture
def mlp_spec() -> nn.ArchitectureSpec:
    return nn.ArchitectureSpec.from_dict({
        "input_shape": [1, 4, 4],
        "num_classes": 2,
        "layers": [{"type": "flatten"}, {"type": "dense", "units": 8}, {"type": "relu"},
                   {"type": "dense", "units": 2}],
    })


@pytest.fixture
def cnn_spec() -> nn.ArchitectureSpec:
    return nn.ArchitectureSpec.from_dict({
        "input_shape": [1, 4, 4],
        "num_classes": 2,
        "layers": [{"type": "conv2d", "filters": 2, "kernel": 3, "stride": 1, "padding": 1},
                   {"type": "relu"},
                   {"type": "maxpool2d", "kernel": 2},
                   {"type": "flatten"},
                   {"type": "dense", "units": 2}],
    })


@pytest.fixture
def dropout_spec() -> nn.ArchitectureSpec:
    return nn.ArchitectureSpec.from_dict({
        "input_shape": [1, 4, 4],
        "num_classes": 2,
        "layers": [{"type": "flatten"}, {"type": "dense", "units": 8}, {"type": "relu"},
                   {"type": "dropout", "rate": 0.5}, {"type": "dense", "units": 2}],
    })


@pytest.fixture
def write_csv():
    """Writer for plain comma-separated rows"""

    def write(path, rows):
        with open(path, "w", encoding="utf-8") as handle:
            for row in rows:
                handle.write(",".join(str(v) for v in row) + "\n")
        return str(path)

    return write
