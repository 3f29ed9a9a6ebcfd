import numpy as np
import pytest
import torch

from postad.config import desk_config
from postad.model import build_model


def tiny_config(**overrides):
    """One layer, two heads, N=8, D=8 at float64."""
    base = dict(window=8, d_model=8, n_layers=1, n_heads=2, d_ff=8, batch_size=4, epochs=1,
                lr=1e-3, dtype="float64", seed=0)
    base.update(overrides)
    return desk_config(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_series():
    rng = np.random.default_rng(0)
    t = np.arange(200)[:, None]
    return np.sin(t / np.array([3.0, 5.0, 7.0, 11.0])) + 0.1 * rng.normal(size=(200, 4))


@pytest.fixture
def tiny_model(tiny_cfg, tiny_series):
    return build_model(4, tiny_cfg, tiny_series)


@pytest.fixture
def tiny_batch(tiny_series):
    return torch.as_tensor(tiny_series[:32].reshape(4, 8, 4), dtype=torch.float64)
