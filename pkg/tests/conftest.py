import numpy as np
import pytest

from csslab.grid import make_grid
from csslab.linops import build_context, build_ortho_set


@pytest.fixture(scope="session")
def grid_default():
    # desk-scale diagnostics grid
    return make_grid(4096, 40.0, "uniform")


@pytest.fixture(scope="session")
def grid_coarse():
    return make_grid(1024, 40.0, "uniform")


@pytest.fixture(scope="session")
def grid_mid():
    return make_grid(2048, 40.0, "uniform")


@pytest.fixture(scope="session")
def ctx_m1(grid_default):
    return build_context(1, grid_default)


@pytest.fixture(scope="session")
def ctx_m2(grid_default):
    return build_context(2, grid_default)


@pytest.fixture(scope="session")
def ctx_m3(grid_default):
    return build_context(3, grid_default)


@pytest.fixture(scope="session")
def oset_m1(ctx_m1):
    return build_ortho_set(ctx_m1, 18.0)


def smooth_bump(grid, m, center, width, amp=1.0):
    r = grid.nodes
    vals = amp * r ** m * np.exp(-(r - center) ** 2 / (2.0 * width ** 2))
    return vals.astype(complex)
