# tests/conftest.py
import numpy as np
import pytest

from occupation_lab.excursions import build_scaffold
from occupation_lab.tilted import TiltSpec, radial_profile


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_tilt():
    """Radial tilt equal to 1 on |x| <= 0.5 inside B_R, R = 2.5, at N = 6."""
    return TiltSpec(radial_profile(0.5, 2.5, h=0.25), N=6, epsilon=0.1)


@pytest.fixture(scope="session")
def small_scaffold(small_tilt):
    return build_scaffold((0, 0, 0), 6, 100.0, radii=(1, 2, 3, 4, 5), spec=small_tilt, domain=("ball", 0.5, 0.1))
