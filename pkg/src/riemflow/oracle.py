"""Deterministic 1-D reference solutions for the inhomogeneous Neumann
semigroup, used to validate every probabilistic estimator.

The backward equation ∂_s F = −L_s F with L_s = ψ²(Δ_s + Z_s) is marched
from t down to s by Crank–Nicolson on a uniform grid over [0,1], with a
mirror-ghost (second order) Neumann closure and Rannacher startup
substeps for non-smooth data.  In one dimension

    Δ_s f = g^{-1} f'' − ½ g^{-2} (∂_x g) f'.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .catalog import ModelInstance
from .errors import OracleFailure

# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid1D:
    n: int
    h: float
    x: np.ndarray
    dt: float
    s: float
    t: float

    def __post_init__(self):
        if self.n < 32:
            raise OracleFailure("grid too coarse (n < 32)")
        if self.dt > self.h + 1e-15:
            raise OracleFailure("time step larger than grid spacing")


def make_grid(s, t, n: int = 401, dt: float = 1e-4) -> Grid1D:
    x = np.linspace(0.0, 1.0, n)
    return Grid1D(n=n, h=x[1] - x[0], x=x, dt=dt, s=s, t=t)


# ---------------------------------------------------------------------------


def _operator_bands(inst: ModelInstance, grid: Grid1D, time, psi=None):
    """Tridiagonal bands (sub, diag, super) of L_time on the grid."""
    x = grid.x[:, None]
    g = np.asarray(inst.flow.g(time, x), dtype=float)[:, 0, 0]
    dg = np.asarray(inst.flow.dg_dx(time, x), dtype=float)[:, 0, 0, 0]
    z = np.asarray(inst.flow.z_field(time, x), dtype=float)[:, 0]
    a = 1.0 / g                                  # f'' coefficient
    b = -0.5 * dg / g**2 + z                     # f' coefficient
    if psi is not None:
        p2 = np.asarray(psi(time, x), dtype=float) ** 2
        a = a * p2
        b = b * p2
    h = grid.h
    lo = a / h**2 - b / (2 * h)
    di = -2.0 * a / h**2
    up = a / h**2 + b / (2 * h)
    # Neumann mirror ghost: f_{-1} = f_1, f_{n} = f_{n-2}; at the walls the
    # drift term vanishes against the boundary condition
    lo0, up0 = 0.0, 2.0 * a[0] / h**2
    loN, upN = 2.0 * a[-1] / h**2, 0.0
    sub = np.concatenate([lo[1:-1], [loN]])
    sup = np.concatenate([[up0], up[1:-1]])
    return sub, di, sup, (lo0, upN)


def _apply_l(bands, f):
    sub, di, sup, _ = bands
    out = di * f
    out[:-1] += sup * f[1:]
    out[1:] += sub * f[:-1]
    return out


def _solve_banded_system(bands, rhs, scale):
    """Solve (I − scale·L) u = rhs for the tridiagonal L."""
    sub, di, sup, _ = bands
    n = len(di)
    ab = np.zeros((3, n))
    ab[0, 1:] = -scale * sup
    ab[1, :] = 1.0 - scale * di
    ab[2, :-1] = -scale * sub
    try:
        return solve_banded((1, 1), ab, rhs)
    except Exception as exc:   # pragma: no cover - defensive
        raise OracleFailure(f"tridiagonal solve failed: {exc}")


def neumann_heat_solve(inst: ModelInstance, f, s, t, grid: Optional[Grid1D] = None,
                       psi=None, return_all: bool = False,
                       rannacher: int = 2):
    """P_{s,t} f on the grid (the s-slice of the backward solution).

    `f` is a callable or an array of node values.  With return_all the
    whole space-time table (times descending from t to s) is returned as
    (times, slices).
    """
    if inst.dim != 1:
        raise OracleFailure("PDE oracle is one-dimensional")
    if grid is None:
        grid = make_grid(s, t)
    if callable(f):
        vals = np.asarray(f(grid.x[:, None]), dtype=float).reshape(-1)
    else:
        vals = np.asarray(f, dtype=float).copy()
    if vals.shape != (grid.n,):
        raise OracleFailure("bad initial data shape")
    m = max(1, int(np.ceil((t - s) / grid.dt - 1e-12)))
    delta = (t - s) / m
    times = [t]
    slices = [vals.copy()]
    cur = vals
    time = t
    for j in range(m):
        target = time - delta
        if j < rannacher:
            # two implicit-Euler half steps damp checkerboard modes
            for frac in (0.5, 0.5):
                tt = time - frac * delta
                bands = _operator_bands(inst, grid, tt, psi)
                cur = _solve_banded_system(bands, cur, frac * delta)
                time = tt
        else:
            bands_hi = _operator_bands(inst, grid, time, psi)
            rhs = cur + 0.5 * delta * _apply_l(bands_hi, cur)
            bands_lo = _operator_bands(inst, grid, target, psi)
            cur = _solve_banded_system(bands_lo, rhs, 0.5 * delta)
            time = target
        time = target
        times.append(time)
        slices.append(cur.copy())
    if return_all:
        return np.array(times), np.array(slices)
    return cur


def oracle_gradient(values, grid: Grid1D, inst: ModelInstance, time):
    """|∇ u|_{g_time} on the grid: 4th-order interior differences of the
    chart derivative, scaled by g^{-1/2}."""
    u = np.asarray(values, dtype=float)
    h = grid.h
    du = np.empty_like(u)
    du[2:-2] = (u[:-4] - 8 * u[1:-2][:-1] + 8 * u[3:][:-1] - u[4:]) / (12 * h)
    du[1] = (u[2] - u[0]) / (2 * h)
    du[-2] = (u[-1] - u[-3]) / (2 * h)
    du[0] = (-3 * u[0] + 4 * u[1] - u[2]) / (2 * h)
    du[-1] = (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * h)
    g = np.asarray(inst.flow.g(time, grid.x[:, None]), dtype=float)[:, 0, 0]
    return np.abs(du) / np.sqrt(g)


def grid_value(values, grid: Grid1D, x):
    """Cubic interpolation of a grid function at chart point(s) x."""
    spl = CubicSpline(grid.x, np.asarray(values, dtype=float))
    return spl(np.asarray(x, dtype=float).reshape(-1)[..., 0]
               if np.asarray(x).ndim > 1 else x)


def grid_gradient_value(values, grid: Grid1D, inst, time, x):
    spl = CubicSpline(grid.x, np.asarray(values, dtype=float))
    xq = float(np.asarray(x).reshape(-1)[0])
    g = float(np.asarray(inst.flow.g(time, np.array([[xq]])), dtype=float)[0, 0, 0])
    return float(spl(xq, 1)) / np.sqrt(g)
