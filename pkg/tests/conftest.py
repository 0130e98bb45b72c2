import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from occlusion_attn import tensor as T

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(x):
    return T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, dtype=np.float64)
