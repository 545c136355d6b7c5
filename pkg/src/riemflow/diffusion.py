"""Time-stepping of the reflecting diffusion and Monte-Carlo semigroups.

The generator convention is Δ_t + Z_t (not ½Δ), realized by the √2
diffusion coefficient.  One Euler–Maruyama step in Itô chart form:

    Δx^k = √(2Δt)·ψ·(u ξ)^k + ψ² Z^k Δt − ψ² Γ^k_ij (u uᵀ)^{ij} Δt

followed by projection-to-boundary reflection (dl = g_t-length of the
projection displacement) and the frame update: parallel transport along
the realized displacement, the vertical correction −½ g^{-1}(∂_t g) u Δt,
and a symmetric-square-root renormalization restoring uᵀ g u = I.

ψ ≡ 1 is the base diffusion; a spatial ψ realizes the generator
ψ²(Δ_t + Z_t) used by the variable-coefficient machinery.

All heavy code paths are vectorized over an ensemble of paths; the
scalar ops (ito_step, reflect_step, evolve_frame, simulate_path) are
thin n=1 wrappers so single-path and ensemble stepping share one code
path bit-for-bit.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .catalog import ModelInstance
from .errors import HorizonExceeded, LeftChart, ProjectionDiverged, RuntimeFailure
from .geometry import christoffel, orthonormal_frame
from .rng import RngStream, counter_normals

# ---------------------------------------------------------------------------
# states
# ---------------------------------------------------------------------------


@dataclass
class DiffusionState:
    t: float
    x: np.ndarray
    u: np.ndarray
    l: float = 0.0


@dataclass
class PathSample:
    times: np.ndarray        # (m+1,)
    xs: np.ndarray           # (m+1, d)
    us: np.ndarray           # (m+1, d, d)
    ls: np.ndarray           # (m+1,)
    noise: np.ndarray        # (m, d)
    dls: np.ndarray          # (m,)

    def to_csv(self, path):
        d = self.xs.shape[1]
        cols = ["step", "t"] + [f"x{i}" for i in range(d)] + ["l", "dl"]
        with open(path, "w") as fh:
            fh.write("# riemflow path sample v1\n")
            fh.write(",".join(cols) + "\n")
            for i in range(len(self.times)):
                dl = float(self.dls[i - 1]) if i > 0 else 0.0
                row = [str(i), repr(float(self.times[i]))]
                row += [repr(float(v)) for v in self.xs[i]]
                row += [repr(float(self.ls[i])), repr(dl)]
                fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# batched frame utilities
# ---------------------------------------------------------------------------


def _inv_sqrt_spd(a):
    """A^{-1/2} for a batch of SPD matrices, closed form in d ≤ 2."""
    d = a.shape[-1]
    if d == 1:
        return 1.0 / np.sqrt(a)
    if d == 2:
        det = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
        s = np.sqrt(np.maximum(det, 0.0))
        tr = a[..., 0, 0] + a[..., 1, 1]
        tau = np.sqrt(np.maximum(tr + 2.0 * s, 1e-300))
        # sqrt(A) = (A + s I)/τ ; invert the 2×2 directly
        b00 = (a[..., 0, 0] + s) / tau
        b11 = (a[..., 1, 1] + s) / tau
        b01 = a[..., 0, 1] / tau
        b10 = a[..., 1, 0] / tau
        det_b = b00 * b11 - b01 * b10
        out = np.empty_like(a)
        out[..., 0, 0] = b11 / det_b
        out[..., 1, 1] = b00 / det_b
        out[..., 0, 1] = -b01 / det_b
        out[..., 1, 0] = -b10 / det_b
        return out
    w, v = np.linalg.eigh(a)
    return np.einsum("...ik,...k,...jk->...ij", v, 1.0 / np.sqrt(w), v)


def initial_frame(inst: ModelInstance, t, x):
    """Canonical orthonormal frame g(t,x)^{-1/2} (batched)."""
    gx = np.asarray(inst.flow.g(t, x), dtype=float)
    return _inv_sqrt_spd(gx)


def frame_orthonormality_defect(inst, t, x, u):
    gx = np.asarray(inst.flow.g(t, x), dtype=float)
    a = np.einsum("...ki,...kl,...lj->...ij", u, gx, u)
    eye = np.eye(u.shape[-1])
    return np.linalg.norm(a - eye, axis=(-2, -1))


# ---------------------------------------------------------------------------
# ensemble cursor
# ---------------------------------------------------------------------------


@dataclass
class StepInfo:
    xi: np.ndarray          # (n, d) driving normals
    x_prev: np.ndarray
    u_prev: np.ndarray
    dl: np.ndarray          # (n,)
    dx: np.ndarray          # realized displacement including reflection
    hit: np.ndarray         # boolean, touched the boundary
    defect: float           # mean frame defect before renormalization


class EnsembleCursor:
    """Steps an ensemble of reflecting paths on a fixed uniform grid.

    Noise is counter-based: step k of path j reads the normals keyed by
    (seed, path_indices[j], k).  Callers may override the noise and add
    extra drift (coupled second paths do both).
    """

    def __init__(self, inst: ModelInstance, x0, s, dt, n_steps, path_indices,
                 seed, psi: Optional[Callable] = None, track_defect: bool = False):
        self.inst = inst
        self.dt = float(dt)
        self.n_steps = n_steps
        self.seed = seed
        self.psi = psi
        self.track_defect = track_defect
        self.path_indices = np.asarray(path_indices, dtype=np.uint64)
        n = len(self.path_indices)
        d = inst.dim
        if s + n_steps * dt > inst.flow.horizon + 1e-12:
            raise HorizonExceeded(
                f"t={s + n_steps * dt} beyond horizon {inst.flow.horizon}")
        x0 = np.asarray(x0, dtype=float)
        self.x = np.broadcast_to(x0, (n, d)).copy()
        self.t = float(s)
        self.u = initial_frame(inst, s, self.x)
        self.l = np.zeros(n)
        self.bad = np.zeros(n, dtype=bool)
        self.k = 0

    def default_noise(self):
        return counter_normals(self.seed, self.path_indices, self.k, self.inst.dim)

    def step(self, xi=None, extra_drift=None, freeze=None) -> StepInfo:
        """Advance one step.  `freeze` marks paths that must not move
        (glued coupled paths copy their partner afterwards)."""
        inst, dt, t = self.inst, self.dt, self.t
        if xi is None:
            xi = self.default_noise()
        x, u = self.x, self.u
        psi_x = None
        if self.psi is not None:
            psi_x = np.asarray(self.psi(t, x), dtype=float)

        gam = christoffel(inst.flow, t, x)
        uut = np.einsum("...ia,...ja->...ij", u, u)
        drift = (np.asarray(inst.flow.z_field(t, x), dtype=float)
                 - np.einsum("...kij,...ij->...k", gam, uut))
        noise_vec = np.einsum("...ij,...j->...i", u, xi)
        if psi_x is None:
            dx = math.sqrt(2.0 * dt) * noise_vec + drift * dt
        else:
            dx = (math.sqrt(2.0 * dt) * psi_x[..., None] * noise_vec
                  + (psi_x**2)[..., None] * drift * dt)
        if extra_drift is not None:
            dx = dx + extra_drift * dt

        x_prop = x + dx
        if inst.project is not None:
            x_new, dl = inst.project(t, x_prop)
            if np.any(~np.isfinite(x_new)):
                raise ProjectionDiverged("non-finite reflection output")
        else:
            x_new, dl = x_prop, np.zeros(len(x))
        hit = dl > 0.0

        if freeze is not None and np.any(freeze):
            x_new = np.where(freeze[..., None], x, x_new)
            dl = np.where(freeze, 0.0, dl)
            hit = hit & ~freeze

        # chart-exit bookkeeping: flag and freeze the offenders
        inside = self.inst.in_chart(x_new)
        newly_bad = ~inside & ~self.bad
        if np.any(newly_bad):
            self.bad |= newly_bad
        x_new = np.where(self.bad[..., None], x, x_new)
        dl = np.where(self.bad, 0.0, dl)

        dx_real = x_new - x
        t_next = t + dt

        # frame: transport along the realized displacement with midpoint
        # Christoffels, then the vertical time correction, then renormalize
        mid = x + 0.5 * dx_real
        gam_mid = christoffel(inst.flow, t, mid)
        du_transport = -np.einsum("...kij,...i,...ja->...ka", gam_mid, dx_real, u)
        gx = np.asarray(inst.flow.g(t, x), dtype=float)
        dgt = np.asarray(inst.flow.dg_dt(t, x), dtype=float)
        ginv_dgt = np.linalg.solve(gx, dgt)
        du_time = -0.5 * np.einsum("...ij,...ja->...ia", ginv_dgt, u) * dt
        u_new = u + du_transport + du_time

        defect = 0.0
        g_next = np.asarray(inst.flow.g(t_next, x_new), dtype=float)
        a = np.einsum("...ki,...kl,...lj->...ij", u_new, g_next, u_new)
        if self.track_defect:
            defect = float(np.mean(np.linalg.norm(
                a - np.eye(inst.dim), axis=(-2, -1))))
        u_new = np.einsum("...ij,...jk->...ik", u_new, _inv_sqrt_spd(a))

        if freeze is not None and np.any(freeze):
            u_new = np.where(freeze[..., None, None], u, u_new)
        u_new = np.where(self.bad[..., None, None], u, u_new)

        info = StepInfo(xi=xi, x_prev=x, u_prev=u, dl=dl, dx=dx_real,
                        hit=hit, defect=defect)
        self.x, self.u = x_new, u_new
        self.l = self.l + dl
        self.t = t_next
        self.k += 1
        return info


# ---------------------------------------------------------------------------
# scalar ops
# ---------------------------------------------------------------------------


def ito_step(inst: ModelInstance, state: DiffusionState, dt, xi) -> DiffusionState:
    """One reflecting Euler step from an explicit state and noise."""
    if state.t + dt > inst.flow.horizon + 1e-12:
        raise HorizonExceeded(f"step past horizon {inst.flow.horizon}")
    cur = EnsembleCursor.__new__(EnsembleCursor)
    cur.inst = inst
    cur.dt = float(dt)
    cur.n_steps = 1
    cur.seed = 0
    cur.psi = None
    cur.track_defect = False
    cur.path_indices = np.zeros(1, dtype=np.uint64)
    cur.x = np.asarray(state.x, dtype=float).reshape(1, -1).copy()
    cur.t = state.t
    cur.u = np.asarray(state.u, dtype=float).reshape(1, inst.dim, inst.dim).copy()
    cur.l = np.array([state.l])
    cur.bad = np.zeros(1, dtype=bool)
    cur.k = 0
    cur.step(xi=np.asarray(xi, dtype=float).reshape(1, -1))
    if cur.bad[0]:
        raise LeftChart(f"path left the chart at t={cur.t}")
    return DiffusionState(t=cur.t, x=cur.x[0], u=cur.u[0], l=float(cur.l[0]))


def reflect_step(inst: ModelInstance, t, x_proposed, u=None):
    """(reflected point, local-time increment) for a possibly-exterior proposal."""
    xp = np.asarray(x_proposed, dtype=float).reshape(1, -1)
    if inst.project is None:
        return xp[0], 0.0
    xn, dl = inst.project(t, xp)
    return xn[0], float(dl[0])


def evolve_frame(inst: ModelInstance, state_before: DiffusionState,
                 state_after: DiffusionState, xi, dt):
    """Frame at state_after, by the same update the cursor performs."""
    x, u = state_before.x, state_before.u
    dx = state_after.x - x
    mid = x + 0.5 * dx
    gam_mid = christoffel(inst.flow, state_before.t, mid)
    du_t = -np.einsum("kij,i,ja->ka", gam_mid, dx, u)
    gx = np.asarray(inst.flow.g(state_before.t, x), dtype=float)
    dgt = np.asarray(inst.flow.dg_dt(state_before.t, x), dtype=float)
    du_v = -0.5 * np.linalg.solve(gx, dgt) @ u * dt
    u_new = u + du_t + du_v
    g_next = np.asarray(inst.flow.g(state_after.t, state_after.x), dtype=float)
    a = u_new.T @ g_next @ u_new
    return u_new @ _inv_sqrt_spd(a)


def simulate_path(inst: ModelInstance, x0, s, t, n_steps, stream: RngStream) -> PathSample:
    """Full recorded path, a deterministic function of its arguments."""
    dt = (t - s) / n_steps
    d = inst.dim
    cur = EnsembleCursor(inst, x0, s, dt, n_steps,
                         [stream.path_index], stream.master_seed)
    cur.k = stream.counter
    times = np.empty(n_steps + 1)
    xs = np.empty((n_steps + 1, d))
    us = np.empty((n_steps + 1, d, d))
    ls = np.empty(n_steps + 1)
    noise = np.empty((n_steps, d))
    dls = np.empty(n_steps)
    times[0], xs[0], us[0], ls[0] = s, cur.x[0], cur.u[0], 0.0
    for k in range(n_steps):
        info = cur.step()
        if cur.bad[0]:
            raise LeftChart(f"path left the chart at step {k}")
        times[k + 1] = cur.t
        xs[k + 1] = cur.x[0]
        us[k + 1] = cur.u[0]
        ls[k + 1] = cur.l[0]
        noise[k] = info.xi[0]
        dls[k] = info.dl[0]
    stream.counter = cur.k
    return PathSample(times=times, xs=xs, us=us, ls=ls, noise=noise, dls=dls)


# ---------------------------------------------------------------------------
# chunked ensemble driver
# ---------------------------------------------------------------------------

CHUNK = 16384
MAX_RESAMPLE = 8


def run_chunked(n_paths: int, fn: Callable, n_workers: int = 1, out_width: int = 1):
    """Evaluate fn(path_indices) -> (values (m, w), ok (m,)) over fixed
    chunks and assemble per-path outputs in path order.

    Chunk boundaries are independent of n_workers, so outputs are
    bit-identical for any worker count.
    """
    chunks = [(i, min(i + CHUNK, n_paths)) for i in range(0, n_paths, CHUNK)]
    values = np.empty((n_paths, out_width))
    ok = np.empty(n_paths, dtype=bool)

    def work(span):
        lo, hi = span
        v, o = fn(np.arange(lo, hi, dtype=np.uint64))
        return lo, hi, np.asarray(v, dtype=float).reshape(hi - lo, out_width), o

    if n_workers <= 1 or len(chunks) == 1:
        results = map(work, chunks)
        for lo, hi, v, o in results:
            values[lo:hi] = v
            ok[lo:hi] = o
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            for lo, hi, v, o in pool.map(work, chunks):
                values[lo:hi] = v
                ok[lo:hi] = o
    return values, ok


def _fixed_order_mean(values):
    """Compensated, order-fixed mean over axis 0 (worker-independent)."""
    return np.array([math.fsum(values[:, j]) / values.shape[0]
                     for j in range(values.shape[1])])


def terminal_ensemble(inst, x0, s, t, n_steps, seed, path_indices,
                      psi=None, stream_offset=0):
    """Terminal (x, u, l, ok) for the given paths, with chart-exit
    resampling via offset stream indices."""
    dt = (t - s) / n_steps
    idx = np.asarray(path_indices, dtype=np.uint64)
    cur = EnsembleCursor(inst, x0, s, dt, n_steps,
                         idx + np.uint64(stream_offset), seed, psi=psi)
    for _ in range(n_steps):
        cur.step()
    x, u, l, bad = cur.x, cur.u, cur.l, cur.bad
    retry = 1
    n_total = 1 << 40        # offset block for resampled streams
    while np.any(bad) and retry <= MAX_RESAMPLE:
        sub = idx[bad]
        c2 = EnsembleCursor(inst, x0, s, dt, n_steps,
                            sub + np.uint64(stream_offset + retry * n_total),
                            seed, psi=psi)
        for _ in range(n_steps):
            c2.step()
        sel = np.where(bad)[0]
        good2 = ~c2.bad
        x[sel[good2]] = c2.x[good2]
        u[sel[good2]] = c2.u[good2]
        l[sel[good2]] = c2.l[good2]
        bad[sel[good2]] = False
        retry += 1
    return x, u, l, ~bad


def mc_semigroup(inst: ModelInstance, f, s, t, x, n_paths, n_steps, seed,
                 n_workers: int = 1, psi=None):
    """(P_{s,t} f(x) estimate, stderr) by plain Monte Carlo."""

    def chunk_fn(indices):
        xt, _, _, ok = terminal_ensemble(inst, x, s, t, n_steps, seed, indices, psi=psi)
        return np.asarray(f(xt), dtype=float)[:, None], ok

    values, ok = run_chunked(n_paths, chunk_fn, n_workers)
    n_badpaths = int(np.sum(~ok))
    if n_badpaths > max(1, n_paths // 1000):
        raise RuntimeFailure(
            f"{n_badpaths}/{n_paths} paths failed chart containment")
    vals = values[ok, 0]
    est = math.fsum(values[ok, 0]) / len(vals)
    stderr = float(np.std(vals, ddof=1) / math.sqrt(len(vals)))
    return est, stderr
