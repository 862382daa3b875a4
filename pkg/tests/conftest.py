import numpy as np
import pytest

from algorithms.shapes import icosphere
from algorithms.topology import unit_frame
from algorithms.voxelizer import voxelize_mesh
from models.grid import FeatureGrid, IndexGrid
from utils.parallel import set_max_threads

SPHERE_RADIUS = 0.45


@pytest.fixture(autouse=True)
def default_threads():
    set_max_threads(None)
    yield
    set_max_threads(None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_grid():
    """Random grid of `count` distinct-or-not coords in [lo, hi)^3"""
    def make(rng, count, lo=0, hi=16, voxel_size=1.0, origin=(0.0, 0.0, 0.0)):
        coords = rng.integers(lo, hi, size=(count, 3))
        return IndexGrid.build_from_coords(coords, voxel_size, origin), coords
    return make


@pytest.fixture
def make_features():
    def make(rng, grid, channels, dtype=np.float64):
        return FeatureGrid(grid, rng.standard_normal((grid.voxel_count, channels)).astype(dtype))
    return make


@pytest.fixture(scope='session')
def sphere_mesh():
    return icosphere(4, radius=SPHERE_RADIUS)


@pytest.fixture(scope='session')
def sphere16(sphere_mesh):
    return voxelize_mesh(sphere_mesh, 16, normalize=False)


@pytest.fixture(scope='session')
def sphere64(sphere_mesh):
    return voxelize_mesh(sphere_mesh, 64, normalize=False, samples_per_voxel=0)


@pytest.fixture
def unit_grid():
    def make(coords, resolution):
        voxel_size, origin = unit_frame(resolution)
        return IndexGrid.build_from_coords(coords, voxel_size, origin)
    return make
