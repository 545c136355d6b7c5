"""1-D Neumann heat solver checks (Crank-Nicolson with Rannacher start)."""

import numpy as np
import pytest

from riemflow import catalog
from riemflow.errors import OracleFailure
from riemflow.oracle import (Grid1D, grid_gradient_value, grid_value,
                             make_grid, neumann_heat_solve, oracle_gradient)


@pytest.fixture(scope="module")
def interval():
    return catalog.make_instance("interval-exp", a=0.5)


# ---------------------------------------------------------------------------
# structural properties
# ---------------------------------------------------------------------------


def test_conservation_of_constants(interval):
    grid = make_grid(0.0, 0.3)
    sol = neumann_heat_solve(interval, lambda xs: np.ones(xs.shape[:-1]),
                             0.0, 0.3, grid)
    assert np.allclose(sol, 1.0, atol=1e-12)


def test_maximum_principle(interval):
    f = lambda xs: np.cos(3.0 * np.pi * xs[..., 0])
    grid = make_grid(0.0, 0.5)
    sol = neumann_heat_solve(interval, f, 0.0, 0.5, grid)
    assert np.max(sol) <= 1.0 + 1e-8
    assert np.min(sol) >= -1.0 - 1e-8


def test_smoothing_toward_the_mean(interval):
    # with e^{2at} dx^2 the invariant measure is uniform: long horizons
    # flatten everything onto the spatial average
    f = lambda xs: np.cos(np.pi * xs[..., 0])
    grid = make_grid(0.0, 8.0, dt=2e-3)
    sol = neumann_heat_solve(interval, f, 0.0, 8.0, grid)
    assert np.max(np.abs(sol)) < 1e-3


def test_grid_refinement_convergence(interval):
    f = lambda xs: xs[..., 0] ** 2 * (1.0 - xs[..., 0]) ** 2
    vals = []
    for n, dt in ((101, 4e-4), (401, 1e-4)):
        grid = make_grid(0.0, 0.2, n=n, dt=dt)
        sol = neumann_heat_solve(interval, f, 0.0, 0.2, grid)
        vals.append(grid_value(sol, grid, 0.37))
    assert vals[1] == pytest.approx(vals[0], abs=5e-6)


# ---------------------------------------------------------------------------
# interpolation helpers
# ---------------------------------------------------------------------------


def test_grid_value_linear_exact():
    grid = make_grid(0.0, 0.1, n=64)
    vals = 2.0 * grid.x + 1.0
    assert grid_value(vals, grid, 0.313) == pytest.approx(2.0 * 0.313 + 1.0)


def test_oracle_gradient_metric_norm(interval):
    # |∇u|_g = e^{-at} |u'| on the interval flow
    grid = make_grid(0.0, 0.1, n=201)
    vals = 3.0 * grid.x
    gn = oracle_gradient(vals, grid, interval, 0.4)
    assert gn[100] == pytest.approx(3.0 * np.exp(-0.5 * 0.4), rel=1e-6)
    assert grid_gradient_value(vals, grid, interval, 0.4, 0.5) == pytest.approx(
        3.0 * np.exp(-0.5 * 0.4), rel=1e-4)


# ---------------------------------------------------------------------------
# guard rails
# ---------------------------------------------------------------------------


def test_grid_rejects_tiny_n():
    with pytest.raises(OracleFailure):
        make_grid(0.0, 0.1, n=8)


def test_solver_needs_one_dim():
    disk = catalog.make_instance("scaled-disk")
    with pytest.raises(OracleFailure):
        neumann_heat_solve(disk, lambda xs: np.ones(xs.shape[:-1]), 0.0, 0.1)


def test_time_slices_end_at_start_time(interval):
    f = lambda xs: xs[..., 0]
    grid = make_grid(0.0, 0.2)
    times, slices = neumann_heat_solve(interval, f, 0.0, 0.2, grid,
                                       return_all=True)
    assert times[-1] == pytest.approx(0.0, abs=1e-12)
    assert slices.shape[1] == grid.n
