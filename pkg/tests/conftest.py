"""Shared fixtures and builders for the test suite."""

import numpy as np
import pytest

from apexprobe.model import Activation, AffineLayer, NetworkSpec
from apexprobe.rng import substream


def random_net(
    rng: np.random.Generator,
    num_layers: int,
    widths,
    input_dim: int,
    num_classes: int,
    activation: Activation | None = None,
    scale: float = 1.0,
) -> NetworkSpec:
    """Random dense network with the given layer widths."""
    act = activation or Activation("relu")
    dims = [input_dim] + list(widths)
    assert len(widths) == num_layers
    layers = []
    for i in range(num_layers):
        w = scale * rng.standard_normal((dims[i + 1], dims[i])) / np.sqrt(dims[i])
        b = scale * rng.standard_normal(dims[i + 1]) / np.sqrt(dims[i])
        layers.append((AffineLayer(w, b), act))
    u = scale * rng.standard_normal((num_classes, dims[-1])) / np.sqrt(dims[-1])
    c = scale * rng.standard_normal(num_classes) / np.sqrt(dims[-1])
    return NetworkSpec(tuple(layers), u, c)


def small_relu_net(seed: int = 0) -> NetworkSpec:
    rng = substream(seed, "test_net")
    return random_net(rng, 2, [8, 6], input_dim=4, num_classes=3)


@pytest.fixture
def relu_net():
    return small_relu_net()


@pytest.fixture
def rng():
    return substream(12345, "test_fixture")
