"""Shared ensembles for the test suite.

Session scope keeps path generation out of individual test timings; the
ensembles are immutable so sharing is safe.
"""

import pytest

from qbsde import TimeGrid, simulate


@pytest.fixture(scope="session")
def grid():
    return TimeGrid.uniform(1.0, 20)


@pytest.fixture(scope="session")
def ens(grid):
    return simulate(grid, dim=1, n_paths=20_000, seed=2024)


@pytest.fixture(scope="session")
def ens_small(grid):
    return simulate(grid, dim=1, n_paths=4_000, seed=5)
