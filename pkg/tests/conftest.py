import numpy as np
import pytest

from difftse import sde


@pytest.fixture
def params():
    return sde.SdeParams()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def rand_spec(rng, shape=(5, 7), scale=0.4, offset=0.0):
    return offset + scale * sde.standard_complex_noise(rng, shape)
