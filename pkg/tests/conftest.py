"""Shared fixtures: small grids and parameter bundles sized for fast tests."""

from __future__ import annotations

import math

import numpy as np
import pytest

from pfs_jko.grid_fields import Grid, State
from pfs_jko.model_config import ModelParams, SolverParams, TimeParams


@pytest.fixture
def grid_small() -> Grid:
    return Grid(4, 3, 0.0, 1.0, 0.0, 0.6)


@pytest.fixture
def grid_medium() -> Grid:
    return Grid(8, 6, 0.0, 1.0, 0.0, 0.5)


@pytest.fixture
def params() -> ModelParams:
    return ModelParams(cn=0.1, theta_s=math.radians(120.0))


@pytest.fixture
def solver() -> SolverParams:
    return SolverParams(lam=200.0)


@pytest.fixture
def time_params() -> TimeParams:
    return TimeParams(dt_min=0.02, dt_max=0.02, t_end=0.04)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


def random_state(grid: Grid, rng: np.random.Generator, *, momenta: bool = True) -> State:
    """Generic interior state: phi in (-1.2, 1.2), psi in (0.1, 0.9), small momenta."""
    shape = (grid.ny, grid.nx)
    phi = rng.uniform(-1.2, 1.2, shape)
    psi = rng.uniform(0.1, 0.9, shape)
    scale = 0.05 if momenta else 0.0
    return State(
        grid,
        phi,
        scale * rng.standard_normal(shape),
        scale * rng.standard_normal(shape),
        psi,
        scale * rng.standard_normal(shape),
        scale * rng.standard_normal(shape),
        rng.uniform(-1.0, 1.0, grid.nx),
    )
