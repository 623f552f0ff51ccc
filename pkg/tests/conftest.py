import numpy as np
import pytest

from trustbalance.fixture import make_fixture


@pytest.fixture(scope="session")
def fixture_panel():
    return make_fixture(seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(gen, d, cond_floor=0.1):
    a = gen.standard_normal((d, d))
    return a @ a.T + cond_floor * d * np.eye(d)
