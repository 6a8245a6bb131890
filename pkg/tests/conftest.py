import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hydrolink.geoacoustics import Environment
from hydrolink.gridmap import GridMapSet, GridSpec

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def deep_env():
    return Environment(water_depth=100.0, sound_speed=1500.0)


@pytest.fixture(scope="session")
def lake_env():
    return Environment(water_depth=7.0, sound_speed=1443.0)


@pytest.fixture(scope="session")
def short_maps():
    """Short-range map set: sources 15-20 m, 0.5 m lattice out to 50 m."""
    env = Environment(200.0, 1500.0)
    spec = GridSpec(0.0, 50.0, 0.5, 5.0, 40.0, 0.5, (15, 16, 17, 18, 19, 20))
    return env, GridMapSet.build(env, spec, 6, on_degenerate="skip")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
