import numpy as np
import pytest

import sqbsde as sq


@pytest.fixture(scope="session")
def grid50():
    return sq.TimeGrid(0.0, 1.0, 50)


@pytest.fixture(scope="session")
def paths4k(grid50):
    return sq.make_paths(grid50, 4000, seed=101)


@pytest.fixture(scope="session")
def paths20k(grid50):
    return sq.make_paths(grid50, 20000, seed=7)


@pytest.fixture(scope="session")
def lognormal():
    return sq.Terminal.exp_affine(0.0, 1.0)
