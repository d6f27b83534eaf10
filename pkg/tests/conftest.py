import numpy as np
import pytest

from gpalign.penalties import build_penalty_set, build_time_grid


@pytest.fixture
def grid3():
    return build_time_grid([0.0, 0.5, 1.0])


@pytest.fixture
def pen3(grid3):
    return build_penalty_set(grid3)


@pytest.fixture
def grid10():
    return build_time_grid(np.linspace(0.0, 2.0, 10))


@pytest.fixture
def pen10(grid10):
    return build_penalty_set(grid10)


@pytest.fixture
def grid_nonuniform():
    return build_time_grid([0.0, 0.1, 0.35, 0.4, 0.75, 1.3, 2.0])


@pytest.fixture
def pen_nonuniform(grid_nonuniform):
    return build_penalty_set(grid_nonuniform)
