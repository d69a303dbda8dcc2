"""
Shared fixtures: bin grids, a seeded generator and a small step-edge scene.
"""

import numpy as np
import pytest

from app.services.dc_codec import BinGrid, default_grid
from app.services.depth_io import Camera


@pytest.fixture
def outdoor_grid():
    """80 bins of 1 m over [0, 80]."""
    return default_grid("outdoor")


@pytest.fixture
def indoor_grid():
    """80 bins of 10 cm over [0, 8]."""
    return default_grid("indoor")


@pytest.fixture
def unit_grid():
    """Ten 1 m bins over [0, 10]; centers 0.5 .. 9.5."""
    return BinGrid(d_min=0.0, d_max=10.0, n_bins=10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    """64 x 48 pinhole camera with the principal point on a pixel center."""
    return Camera(fx=50.0, fy=50.0, cx=32.0, cy=24.0, width=64, height=48)
