import numpy as np
import pytest

from busnet import precision


def zero_params(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
