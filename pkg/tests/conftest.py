import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from shftrack.constants import DAY, GEO_RADIUS
from shftrack.observation import SensorSite
from shftrack.orbits import circular_state, earth_rotation_angle

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def zimmerwald():
    return SensorSite("zimmerwald", math.radians(46.877), math.radians(7.465), 0.951)


def geo_state(lon_deg=-4.8, inc_deg=2.0, raan_deg=80.0, epoch=800 * DAY, radius=GEO_RADIUS):
    """Circular near-GEO state over the given Earth-fixed longitude."""
    L = math.radians(lon_deg) + float(earth_rotation_angle(epoch))
    return circular_state(radius, math.radians(inc_deg), math.radians(raan_deg), L, epoch=epoch)


@pytest.fixture
def geo():
    return geo_state()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
