import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lpdrecon.geometry import fan_geometry, parallel_geometry  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def geom8():
    return parallel_geometry((8, 8), 10, 12)


@pytest.fixture(scope="session")
def geom16():
    return parallel_geometry((16, 16), 20, 24, pixel_size=2 / 16)


@pytest.fixture(scope="session")
def parallel32():
    return parallel_geometry((32, 32), 30, 46)


@pytest.fixture(scope="session")
def fan32():
    return fan_geometry((32, 32), 60, 64, src_to_axis=50.0, axis_to_detector=50.0)
