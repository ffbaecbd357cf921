import numpy as np
import pytest

from mrsi.pipeline.core import GridSpec
from mrsi.pipeline.phantom import smooth_coil_maps
from mrsi.pipeline.trajectory import generate_eccentric
from mrsi.settings import load_config


@pytest.fixture
def grid8():
    """8x8x2 grid, 10 mm voxels, 8 timepoints, 2 coils."""
    return GridSpec(nx=8, ny=8, nz=2, fov_x=80.0, fov_y=80.0, fov_z=20.0, dwell=4e-4, n_time=8, n_coils=2)


@pytest.fixture
def grid16():
    return GridSpec(nx=16, ny=16, nz=4, fov_x=160.0, fov_y=160.0, fov_z=40.0, dwell=4e-4, n_time=8, n_coils=2)


@pytest.fixture
def traj8(grid8):
    return generate_eccentric(grid8, 0.25, seed=1)


@pytest.fixture
def traj16(grid16):
    return generate_eccentric(grid16, 0.25, seed=3)


@pytest.fixture
def maps8(grid8):
    return smooth_coil_maps(grid8.with_(n_time=1), 2, seed=0)


@pytest.fixture
def maps16(grid16):
    return smooth_coil_maps(grid16.with_(n_time=1), 2, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    return load_config()


def blob(grid, center=(0.0, 0.0, 0.0), width_mm=20.0):
    """Smooth complex test object."""
    x, y, z = np.meshgrid(*grid.voxel_coords(), indexing="ij")
    r2 = (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2
    return np.exp(-r2 / (2 * width_mm**2)) * np.exp(1j * 0.3 * x / grid.fov_x)
