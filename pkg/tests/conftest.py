import numpy as np
import pytest

from handmesh.hand_model import generate_synthetic_assets
from handmesh.sampling import build_hierarchy


@pytest.fixture(scope="session")
def assets():
    return generate_synthetic_assets(seed=0)


@pytest.fixture(scope="session")
def hierarchy(assets):
    return build_hierarchy(assets.template, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
