import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from exactsde import catalog

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def entries():
    return {mid: catalog.get(mid) for mid in catalog.ids()}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
