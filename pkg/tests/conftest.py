import numpy as np
import pytest

from longbayes.surface import SurfaceMesh, assemble_fem
from longbayes.synth import grid_patch, icosphere_patch


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def unit_triangle():
    return SurfaceMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


@pytest.fixture(scope="session")
def small_grid():
    return grid_patch(6, 5, spacing=2.0)


@pytest.fixture(scope="session")
def small_fem(small_grid):
    return assemble_fem(small_grid)


@pytest.fixture(scope="session")
def sphere_patch():
    return icosphere_patch(n_vertices=150)
