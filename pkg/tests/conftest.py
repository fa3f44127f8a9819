import numpy as np
import pytest

from hypolab.grid import Grid
from hypolab.operators import ModelSpec, assemble


@pytest.fixture(scope="session")
def harmonic_1d():
    return assemble(ModelSpec("HomogeneousFP", Grid.velocity(256, 8.0), gamma=2.0, M=4.0, R=2.83))


@pytest.fixture(scope="session")
def torus_small():
    return assemble(ModelSpec("TorusKFP", Grid.torus(16, 32, 7.0), gamma=2.0, M=4.0, R=2.83))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
