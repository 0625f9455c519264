"""Shared fixtures: small hand-built networks, finite differences, IDX fixture files."""
from pathlib import Path
from typing import Callable

import numpy as np
import pytest

from src.data import DATASET_FILES, Dataset, one_hot, write_idx
from src.network import Layer, Network, init_network

FD_STEP = 1e-5


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Numerical gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + step
        up = f(x)
        x[index] = original - step
        down = f(x)
        x[index] = original
        grad[index] = (up - down) / (2.0 * step)
    return grad


def assert_gradients_close(analytic: np.ndarray, numeric: np.ndarray, rel: float = 1e-5, abs_: float = 1e-8):
    """max(rel * |numeric|, abs) tolerance per entry."""
    tolerance = np.maximum(rel * np.abs(numeric), abs_)
    np.testing.assert_array_less(np.abs(analytic - numeric), tolerance + 1e-12)


def with_parameter(net: Network, layer: int, name: str, value: np.ndarray) -> Network:
    probe = net.copy()
    setattr(probe.layers[layer], name, np.array(value, dtype=np.float64))
    return probe


@pytest.fixture
def abs_net() -> Network:
    """|x| = relu(x) + relu(-x); true Lipschitz constant 1, layerwise bound 2."""
    return Network([
        Layer(np.array([[1.0], [-1.0]]), np.zeros(2), "relu"),
        Layer(np.array([[1.0, 1.0]]), np.zeros(1), "identity"),
    ])


@pytest.fixture
def diag_net() -> Network:
    """Linear map diag(2, 1)."""
    return Network([Layer(np.diag([2.0, 1.0]), np.zeros(2), "identity")])


@pytest.fixture
def small_net() -> Network:
    return init_network([3, 5, 4, 2], ["sigmoid", "relu", "identity"], seed=7)


@pytest.fixture
def toy_classification() -> Dataset:
    """Two Gaussian blobs in [0, 1]^4, labels 0 and 1 (ten classes in the one-hot)."""
    rng = np.random.default_rng(3)
    n = 60
    labels = np.repeat([0, 1], n // 2)
    centers = np.where(labels[:, None] == 0, 0.25, 0.75)
    inputs = np.clip(centers + 0.05 * rng.standard_normal((n, 4)), 0.0, 1.0)
    return Dataset(inputs, one_hot(labels), "blobs")


def write_idx_pair(directory: Path, dataset: Dataset, part: str = "train", image_shape=None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    images, labels = write_idx(dataset, image_shape)
    image_name, label_name = DATASET_FILES[part]
    (directory / image_name).write_bytes(images)
    (directory / label_name).write_bytes(labels)


@pytest.fixture
def idx_dataset() -> Dataset:
    """24 images of 2x3 pixels whose values are exact multiples of 1/255."""
    rng = np.random.default_rng(11)
    pixels = rng.integers(0, 256, size=(24, 6)) / 255.0
    return Dataset(pixels, one_hot(np.arange(24) % 10), "fixture")


@pytest.fixture
def mnist_cache(tmp_path, idx_dataset) -> Path:
    """A dataset cache directory with tiny train and test IDX files under mnist/."""
    rng = np.random.default_rng(5)
    n = 80
    labels = np.arange(n) % 10
    # Class-dependent brightness pattern so a small net can learn something.
    inputs = np.clip(labels[:, None] / 9.0 + 0.1 * rng.standard_normal((n, 6)), 0.0, 1.0)
    inputs = np.rint(inputs * 255.0) / 255.0
    train = Dataset(inputs, one_hot(labels), "train")
    write_idx_pair(tmp_path / "mnist", train, "train", (2, 3))
    write_idx_pair(tmp_path / "mnist", idx_dataset, "test", (2, 3))
    return tmp_path
