"""Girsanov coupling machinery and dimension-free Harnack inequalities.

The attracting coupling adds a drift ρ_t/ξ_t toward the first path to
the second path's SDE; the schedule ξ solves 2 + 2K(t)ξ + ξ' = θ with
ξ_T = 0, which forces coalescence before T while keeping the change of
measure R integrable.  Everything is estimated under the simulation
measure where the first path is the unweighted diffusion, so semigroup
values come from plain Monte Carlo (or the 1-D oracle) and the weighted
quantities use the per-path ledger log R = −∫⟨v,dB̃⟩ − ½∫|v|² dt.

The variable-coefficient machinery runs the generator ψ²(Δ_t+Z_t) and
the non-convex extension conformally rescales g̃ = φ^{-2}g so that the
boundary becomes convex and the ψ = φ^{-1} machinery applies.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicSpline

from . import geometry
from .catalog import ModelInstance
from .coupling import CoupledCursor
from .diffusion import mc_semigroup
from .errors import (LedgerOverflow, PConstraintViolated, PhiNotInD,
                     R0TooLarge, RuntimeFailure, ThetaOutOfRange)
from .geometry import ConformalFactor, conformal_flow
from .oracle import grid_value, make_grid, neumann_heat_solve

# ---------------------------------------------------------------------------
# xi schedule
# ---------------------------------------------------------------------------


@dataclass
class XiSchedule:
    theta: float
    K: Callable
    T: float
    xi: Callable
    xi_prime: Callable
    xi0: float
    int_exp2k: float        # ∫₀ᵀ e^{2∫₀ˢK} ds

    def ode_residual(self, ts):
        ts = np.asarray(ts, dtype=float)
        dxi = self.xi_prime(ts)
        return 2.0 + 2.0 * np.array([self.K(t) for t in ts]) * self.xi(ts) \
            + dxi - self.theta


def _cumulative_k(K, T, n: int = 4097):
    ts = np.linspace(0.0, T, n)
    kv = np.array([K(t) for t in ts])
    ck = cumulative_trapezoid(kv, ts, initial=0.0)
    return ts, ck


def xi_schedule(theta: float, K: Callable, T: float, n_grid: int = 4097) -> XiSchedule:
    if not (0.0 < theta < 2.0):
        raise ThetaOutOfRange(f"theta={theta} outside (0, 2)")
    from scipy.interpolate import CubicSpline
    ts, ck = _cumulative_k(K, T, n_grid)
    e2k = np.exp(2.0 * ck)
    cum = cumulative_trapezoid(e2k, ts, initial=0.0)
    total = cum[-1]
    ck_sp = CubicSpline(ts, ck)
    cum_sp = CubicSpline(ts, cum)
    ck_d = ck_sp.derivative()
    cum_d = cum_sp.derivative()

    def xi(t):
        t = np.asarray(t, dtype=float)
        return (2.0 - theta) * np.exp(-2.0 * ck_sp(t)) * (total - cum_sp(t))

    def xi_prime(t):
        t = np.asarray(t, dtype=float)
        e = np.exp(-2.0 * ck_sp(t))
        return (2.0 - theta) * e * (-2.0 * ck_d(t) * (total - cum_sp(t))
                                    - cum_d(t))

    return XiSchedule(theta=theta, K=K, T=T, xi=xi, xi_prime=xi_prime,
                      xi0=float((2.0 - theta) * total), int_exp2k=float(total))


def int_exp_2k(K, S, T, n: int = 4097):
    """∫_S^T e^{2∫_S^r K(u) du} dr."""
    ts = np.linspace(S, T, n)
    kv = np.array([K(t) for t in ts])
    ck = cumulative_trapezoid(kv, ts, initial=0.0)
    return float(np.trapz(np.exp(2.0 * ck), ts))


def int_exp_1k(K, S, T, n: int = 4097):
    """∫_S^T e^{∫_S^r K(u) du} dr."""
    ts = np.linspace(S, T, n)
    kv = np.array([K(t) for t in ts])
    ck = cumulative_trapezoid(kv, ts, initial=0.0)
    return float(np.trapz(np.exp(ck), ts))


# ---------------------------------------------------------------------------
# weighted coupled runs
# ---------------------------------------------------------------------------


@dataclass
class GirsanovRun:
    log_r: np.ndarray          # (n,)
    coalesced: np.ndarray      # (n,) bool
    glue_time: np.ndarray      # (n,) nan when not glued
    rho_final: np.ndarray      # residual distance of non-glued runs
    ok: np.ndarray             # chart containment
    stoch: np.ndarray          # ∫⟨v, dB̃⟩ accumulator
    quad: np.ndarray           # ∫|v|² dt accumulator


def girsanov_coupled_run(inst: ModelInstance, x, y, theta, T, n_steps, seed,
                         n_paths, s: float = 0.0, K: Optional[Callable] = None,
                         psi=None, xi_floor: Optional[float] = None,
                         eps_glue: Optional[float] = None,
                         chunk_offset: int = 0) -> GirsanovRun:
    """Parallel coupling from (x, y) with the attracting drift ρ/ξ on the
    second path and the Girsanov ledger along the way."""
    if K is None:
        K = inst.k_bound
    sched = xi_schedule(theta, lambda r: K(s + r), T - s)
    dt = (T - s) / n_steps
    floor = 1e-14 * (T - s) if xi_floor is None else xi_floor
    sqrt2 = math.sqrt(2.0)

    drift_box = {}

    def attract(t, xa, xb):
        # exponential-Euler attraction: the deterministic contraction of
        # the distance over one step is exp(−∫ du/ξ); realizing it as an
        # effective drift keeps the scheme stable as ξ → 0 near T, where
        # the integral diverges and the displacement becomes the full ρ
        rho = inst.distance(t, xa, xb)
        us = t - s + dt * np.array([0.0, 0.25, 0.5, 0.75, 1.0])
        inv_xi = 1.0 / np.maximum(sched.xi(np.minimum(us, T - s)), floor)
        contraction = min(float(np.trapz(inv_xi, dx=0.25 * dt)), 60.0)
        rate = -math.expm1(-contraction) / dt
        tangent = inst.unit_tangent(t, xb, xa)       # at y, toward x, g-unit
        D = (rho * rate)[..., None] * tangent
        drift_box["D"] = D
        return D

    idx = np.arange(chunk_offset, chunk_offset + n_paths, dtype=np.uint64)
    cur = CoupledCursor(inst, x, y, s, dt, n_steps, idx, seed,
                        mode="parallel", extra_drift=attract,
                        eps_glue=eps_glue, psi=psi)
    n = n_paths
    stoch = np.zeros(n)
    quad = np.zeros(n)
    for _ in range(n_steps):
        t_k = cur.t
        glued_prev = cur.glued.copy()
        yb = cur.b.x.copy()
        ub = cur.b.u.copy()
        info_a, _ = cur.step()
        D = drift_box.pop("D", None)
        live = ~glued_prev
        if D is None or not np.any(live):
            continue
        vb = np.linalg.solve(ub, D[..., None])[..., 0] / sqrt2
        if psi is not None:
            vb = vb / np.asarray(psi(t_k, yb), dtype=float)[..., None]
        A = cur.last_transform
        axi = np.einsum("...ij,...j->...i", A, info_a.xi)
        ds = np.einsum("...i,...i->...", vb, axi) * math.sqrt(dt)
        dq = np.einsum("...i,...i->...", vb, vb) * dt
        stoch[live] += ds[live]
        quad[live] += dq[live]
        if np.max(np.abs(stoch) + 0.5 * quad) > 700.0:
            raise LedgerOverflow("|log R| exceeded 700")
    log_r = -stoch - 0.5 * quad
    return GirsanovRun(log_r=log_r, coalesced=cur.glued.copy(),
                       glue_time=cur.glue_time.copy(),
                       rho_final=cur.rho.copy(), ok=~cur.bad,
                       stoch=stoch, quad=quad)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class HarnackReport:
    instance: str
    theorem: str
    p: float
    theta: float
    S: float
    T: float
    lhs: float
    rhs: float
    stderr_lhs: float
    stderr_rhs: float
    coalesce_rate: float = 1.0
    constants: dict = field(default_factory=dict)

    @property
    def slack(self):
        return self.rhs - self.lhs

    @property
    def passed(self):
        tol = 3.0 * (self.stderr_lhs + self.stderr_rhs) + 1e-12
        return self.lhs <= self.rhs + tol

    def csv_row(self, x, y):
        return [self.instance, self.theorem, repr(self.p), repr(self.theta),
                repr(self.S), repr(self.T),
                ";".join(repr(float(v)) for v in np.atleast_1d(x)),
                ";".join(repr(float(v)) for v in np.atleast_1d(y)),
                repr(self.lhs), repr(self.rhs), repr(self.stderr_lhs),
                repr(self.stderr_rhs), repr(self.slack),
                "PASS" if self.passed else "FAIL", repr(self.coalesce_rate)]


# ---------------------------------------------------------------------------
# semigroup evaluation helpers (oracle in 1-D, MC otherwise)
# ---------------------------------------------------------------------------


def _semigroup_value(inst, f, S, T, x, n_paths, n_steps, seed, psi=None,
                     oracle_n: int = 401):
    if inst.dim == 1 and psi is None:
        grid = make_grid(S, T, n=oracle_n, dt=min(1e-4, (T - S) / 32))
        sol = neumann_heat_solve(inst, lambda xs: f(xs), S, T, grid)
        return float(grid_value(sol, grid, float(np.asarray(x).ravel()[0]))), 0.0
    return mc_semigroup(inst, f, S, T, x, n_paths, n_steps, seed, psi=psi)


# ---------------------------------------------------------------------------
# Harnack verifications (constant coefficient)
# ---------------------------------------------------------------------------


def log_harnack_verify(inst: ModelInstance, f, x, y, S, T, n_paths, n_steps,
                       seed, K: Optional[Callable] = None) -> HarnackReport:
    """P_{S,T} log f(y) ≤ log P_{S,T} f(x) + ρ_S(x,y)² / (4∫_S^T e^{2∫K})."""
    if K is None:
        K = inst.k_bound
    lhs, se_l = _semigroup_value(inst, lambda xs: np.log(f(xs)), S, T, y,
                                 n_paths, n_steps, seed)
    pf, se_p = _semigroup_value(inst, f, S, T, x, n_paths, n_steps, seed ^ 0x51)
    rho = float(inst.distance(S, np.asarray(x, dtype=float)[None],
                              np.asarray(y, dtype=float)[None])[0])
    denom = 4.0 * int_exp_2k(K, S, T)
    rhs = math.log(pf) + rho * rho / denom
    se_r = se_p / max(pf, 1e-300)
    return HarnackReport(instance=inst.key, theorem="log-harnack", p=1.0,
                         theta=1.0, S=S, T=T, lhs=lhs, rhs=rhs,
                         stderr_lhs=se_l, stderr_rhs=se_r,
                         constants={"rho": rho, "denom": denom})


def p_harnack_verify(inst: ModelInstance, f, p, x, y, S, T, n_paths, n_steps,
                     seed, K: Optional[Callable] = None) -> HarnackReport:
    """(P_{S,T}f(y))^p ≤ P_{S,T}f^p(x) · exp[p ρ² / (4(p−1)∫e^{2∫K})]."""
    if p <= 1.0:
        raise PConstraintViolated(f"p={p} must exceed 1")
    if K is None:
        K = inst.k_bound
    pf_y, se_y = _semigroup_value(inst, f, S, T, y, n_paths, n_steps, seed)
    pfp_x, se_x = _semigroup_value(inst, lambda xs: f(xs) ** p, S, T, x,
                                   n_paths, n_steps, seed ^ 0x51)
    rho = float(inst.distance(S, np.asarray(x, dtype=float)[None],
                              np.asarray(y, dtype=float)[None])[0])
    expo = p * rho * rho / (4.0 * (p - 1.0) * int_exp_2k(K, S, T))
    lhs = pf_y ** p
    rhs = pfp_x * math.exp(expo)
    return HarnackReport(instance=inst.key, theorem="p-harnack", p=p,
                         theta=1.0, S=S, T=T, lhs=lhs, rhs=rhs,
                         stderr_lhs=p * pf_y ** (p - 1.0) * se_y,
                         stderr_rhs=math.exp(expo) * se_x,
                         constants={"rho": rho, "exponent": expo})


# ---------------------------------------------------------------------------
# ledger checks
# ---------------------------------------------------------------------------


def normalization_check(run: GirsanovRun):
    """E[R] = 1 within MC error (Girsanov normalization)."""
    r = np.exp(run.log_r[run.ok])
    est = float(np.mean(r))
    se = float(np.std(r, ddof=1) / math.sqrt(len(r)))
    return est, se


def entropy_bound_check(run: GirsanovRun, rho0, theta, K, T, S: float = 0.0):
    """E[R log R] ≤ ρ₀² / (4θ(2−θ)∫₀ᵀe^{2∫K})."""
    r = np.exp(run.log_r[run.ok])
    v = r * run.log_r[run.ok]
    est = float(np.mean(v))
    se = float(np.std(v, ddof=1) / math.sqrt(len(v)))
    bound = rho0 ** 2 / (4.0 * theta * (2.0 - theta) * int_exp_2k(K, S, T))
    return est, se, bound


def moment_bound_check(run: GirsanovRun, rho0, p, theta, K, T, S: float = 0.0):
    """E[R^{p/(p−1)}] ≤ exp[p ρ₀² / (4(p−1)²θ(2−θ)∫e^{2∫K})].

    Returns (estimate, stderr, bound, heavy_tail_flag)."""
    q = p / (p - 1.0)
    r = np.exp(q * run.log_r[run.ok])
    est = float(np.mean(r))
    se = float(np.std(r, ddof=1) / math.sqrt(len(r)))
    bound = math.exp(p * rho0 ** 2 /
                     (4.0 * (p - 1.0) ** 2 * theta * (2.0 - theta)
                      * int_exp_2k(K, S, T)))
    heavy = se > 0.2 * max(est, 1e-300)
    return est, se, bound, heavy


# ---------------------------------------------------------------------------
# variable diffusion coefficient
# ---------------------------------------------------------------------------


def probe_points(inst: ModelInstance, n: int = 61):
    """A dense grid of chart points covering where paths live."""
    key = inst.key
    if inst.dim == 1:
        return np.linspace(0.0, 1.0, n)[:, None]
    if key == "scaled-disk":
        r = np.linspace(0.0, 1.0, n)
        a = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
        R, A = np.meshgrid(r, a, indexing="ij")
        return np.stack([R * np.cos(A), R * np.sin(A)], axis=-1).reshape(-1, 2)
    if key == "ricciflow-capband":
        tmin = inst.params["theta_min"]
        tmax = inst.params["theta_max"]
        th = np.linspace(tmin, tmax, n)
        return np.stack([th, np.zeros_like(th)], axis=-1)
    # half-plane collar
    c = inst.params.get("collar", 3.0)
    x1 = np.linspace(-c, c, n)
    x2 = np.linspace(0.0, c, n)
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    return np.stack([X1, X2], axis=-1).reshape(-1, 2)


def _grad_norm_sup(inst, fn, t, pts, h: float = 1e-5):
    """sup over pts of the g_t-norm of ∇fn (fn scalar on chart points)."""
    d = pts.shape[-1]
    grad = np.empty(pts.shape)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        grad[..., i] = (np.asarray(fn(t, pts + e)) - np.asarray(fn(t, pts - e))) / (2 * h)
    ginv = np.linalg.inv(np.asarray(inst.flow.g(t, pts), dtype=float))
    sq = np.einsum("...i,...ij,...j->...", grad, ginv, grad)
    return float(np.sqrt(np.max(sq))), grad


def k_hat_constant(inst: ModelInstance, psi, t, pts=None):
    """K̂(t) = 2K₁‖ψ‖² + 4‖Z‖‖ψ‖‖∇ψ‖ + 2d‖∇ψ‖² + K₂ by grid extremization."""
    if pts is None:
        pts = probe_points(inst)
    d = inst.dim
    psv = np.asarray(psi(t, pts), dtype=float)
    psi_sup = float(np.max(np.abs(psv)))
    dpsi_sup, _ = _grad_norm_sup(inst, psi, t, pts)
    zv = np.asarray(inst.flow.z_field(t, pts), dtype=float)
    gv = np.asarray(inst.flow.g(t, pts), dtype=float)
    z_sup = float(np.sqrt(np.max(np.einsum("...i,...ij,...j->...", zv, gv, zv))))
    k1 = inst.k1_bound(t)
    k2 = inst.k2_bound(t)
    return (2.0 * k1 * psi_sup ** 2 + 4.0 * z_sup * psi_sup * dpsi_sup
            + 2.0 * d * dpsi_sup ** 2 + k2)


def psi_extremes(inst, psi, S, T, pts=None, n_t: int = 9):
    if pts is None:
        pts = probe_points(inst)
    lam = math.inf
    sup_1m = -math.inf
    for t in np.linspace(S, T, n_t):
        v = np.asarray(psi(t, pts), dtype=float)
        lam = min(lam, float(np.min(np.abs(v))))
        sup_1m = max(sup_1m, float(np.max(1.0 - v)))
    return lam, max(0.0, sup_1m)


def variable_coeff_harnack(inst: ModelInstance, psi, p, x, y, S, T, n_paths,
                           n_steps, seed, k_hat: Optional[Callable] = None,
                           f=None):
    """Harnack inequalities for the generator ψ²(Δ_t + Z_t).

    Returns (log-form report, power-form report, constants dict).  The
    exponential damping uses the schedule exponent −∫K̂, which collapses
    to the constant-coefficient 2∫K at ψ ≡ 1.
    """
    if f is None:
        f = _default_test_function(inst)
    pts = probe_points(inst)
    if k_hat is None:
        def k_hat(t):
            return k_hat_constant(inst, psi, t, pts)
    lam, delta_T = psi_extremes(inst, psi, S, T, pts)
    if lam <= 0.0:
        raise RuntimeFailure("psi must be bounded away from zero")
    p_min = (1.0 + delta_T / lam) ** 2
    if p <= p_min:
        raise PConstraintViolated(f"p={p} must exceed (1+δ/λ)²={p_min}")

    damp = int_exp_2k(lambda t: -0.5 * k_hat(t), S, T)   # ∫ e^{−∫K̂}
    rho = float(inst.distance(S, np.asarray(x, dtype=float)[None],
                              np.asarray(y, dtype=float)[None])[0])

    lhs1, se1 = _semigroup_value(inst, lambda xs: np.log(f(xs)), S, T, y,
                                 n_paths, n_steps, seed, psi=psi)
    pf, sep = _semigroup_value(inst, f, S, T, x, n_paths, n_steps,
                               seed ^ 0x51, psi=psi)
    c1 = rho * rho / (4.0 * lam * lam * damp)
    rep1 = HarnackReport(instance=inst.key, theorem="psi-log-harnack", p=1.0,
                         theta=1.0, S=S, T=T, lhs=lhs1,
                         rhs=math.log(pf) + c1,
                         stderr_lhs=se1, stderr_rhs=sep / max(pf, 1e-300),
                         constants={"lambda": lam, "delta_T": delta_T,
                                    "damp": damp, "rho": rho})

    delta_p = max(delta_T, lam * (math.sqrt(p) - 1.0) / 2.0)
    denom = 8.0 * delta_p * ((math.sqrt(p) - 1.0) * lam - delta_p) * damp
    expo = math.sqrt(p) * (math.sqrt(p) - 1.0) * rho / denom
    pf_y, sey = _semigroup_value(inst, f, S, T, y, n_paths, n_steps,
                                 seed ^ 0x77, psi=psi)
    pfp_x, sex = _semigroup_value(inst, lambda xs: f(xs) ** p, S, T, x,
                                  n_paths, n_steps, seed ^ 0x99, psi=psi)
    rep2 = HarnackReport(instance=inst.key, theorem="psi-p-harnack", p=p,
                         theta=1.0, S=S, T=T, lhs=pf_y ** p,
                         rhs=pfp_x * math.exp(expo),
                         stderr_lhs=p * pf_y ** (p - 1.0) * sey,
                         stderr_rhs=math.exp(expo) * sex,
                         constants={"delta_p": delta_p, "exponent": expo})
    consts = {"lambda_T": lam, "delta_T": delta_T, "delta_p": delta_p,
              "damp_integral": damp, "p_min": p_min, "rho": rho}
    return rep1, rep2, consts


def _default_test_function(inst):
    if inst.dim == 1:
        return lambda xs: 1.0 + np.cos(np.pi * xs[..., 0]) ** 2
    return lambda xs: 1.0 + np.cos(xs[..., 0]) ** 2


# ---------------------------------------------------------------------------
# boundary convexification profile
# ---------------------------------------------------------------------------


def phi_profile(r0, sigma, k, theta, d, n_quad: int = 2001):
    """Wall-collar conformal factor profile.

    h(s) = cos(√k s) − (θ/√k) sin(√k s); the admissible collar width is
    r₀ ≤ k^{-1/2} arcsin(√k/√(k+θ²)).  The returned φ(r) equals 1 at the
    wall, increases with wall slope exactly σ (so N log φ = σ there, and
    II ≥ −σ boundaries convexify under g̃ = φ^{-2}g), and is constant
    beyond r₀.  Returns (φ vectorized in r, ‖φ‖_∞, δ).
    """
    if sigma < 0.0:
        raise RuntimeFailure("sigma must be nonnegative")
    sk = math.sqrt(k)
    r0_max = math.asin(sk / math.sqrt(k + theta * theta)) / sk
    if r0 > r0_max + 1e-12:
        raise R0TooLarge(f"r0={r0} exceeds admissible {r0_max}")
    if sigma == 0.0:
        return (lambda r: np.ones_like(np.asarray(r, dtype=float)), 1.0, 0.0)

    def h(s):
        return np.cos(sk * s) - (theta / sk) * np.sin(sk * s)

    ss = np.linspace(0.0, r0, n_quad)
    hr0 = float(h(r0))
    prof = np.maximum(h(ss) - hr0, 0.0)
    inner_int = float(np.trapz(prof ** (d - 1), ss))
    delta = sigma * (1.0 - hr0) ** (d - 1) / inner_int

    # base (decreasing) shape 1 + δ ∫_r^{r0} prof^{1−d} ∫_s^{r0} prof^{d−1}
    cum_inner = cumulative_trapezoid(prof ** (d - 1), ss, initial=0.0)
    tail_inner = cum_inner[-1] - cum_inner          # ∫_s^{r0} prof^{d−1} du
    with np.errstate(divide="ignore", invalid="ignore"):
        integ = np.where(prof > 0.0, prof ** (1 - d) * tail_inner, 0.0)
    # lim s→r0 of prof^{1-d}·tail: finite; patch the endpoint by extension
    if d > 1:
        integ[-1] = integ[-2]
    cum_outer = cumulative_trapezoid(integ, ss, initial=0.0)
    base = 1.0 + delta * (cum_outer[-1] - cum_outer)   # φ̂: decreasing, φ̂(r0)=1
    norm = float(base[0])                               # ‖φ̂‖ = φ̂(0)

    # increasing orientation: φ(0)=1, wall slope +σ·(collar shape), flat top
    flipped = 1.0 + (norm - base)

    # C² interpolant so that finite differences of the returned callable
    # see the true profile curvature rather than interpolation corners
    spline = CubicSpline(ss, flipped, bc_type=((1, float(delta * integ[0])),
                                               (1, 0.0)))

    def phi(r):
        r = np.asarray(r, dtype=float)
        return spline(np.clip(r, 0.0, r0))

    return phi, float(flipped[-1]), float(delta)


# ---------------------------------------------------------------------------
# non-convex extension
# ---------------------------------------------------------------------------


def k_phi_terms(inst: ModelInstance, phi_fn, dphi_fn, lap_phi_fn, S, T,
                pts=None, n_t: int = 5):
    """The conformal curvature constant and its ingredients:

    K_{φ,1} = sup{K₁φ² − φΔφ + (d−3)|∇φ|² + 2|Z| φ |∇φ|}
    K_{φ,2} = sup{K₂ − 2φ^{-1}∂_tφ}
    K_φ     = 2K_{φ,1} + 4‖φZ+(d−2)∇φ‖‖∇φ‖ + 2d‖∇φ‖² + K_{φ,2}
    """
    if pts is None:
        pts = probe_points(inst)
    d = inst.dim
    out = {"k_phi1": -math.inf, "k_phi2": -math.inf, "cross": -math.inf,
           "grad_sup": 0.0}
    for t in np.linspace(S, T, n_t):
        pv = np.asarray(phi_fn(t, pts), dtype=float)
        gv = np.asarray(inst.flow.g(t, pts), dtype=float)
        ginv = np.linalg.inv(gv)
        dp = np.asarray(dphi_fn(t, pts), dtype=float)
        grad_sq = np.einsum("...i,...ij,...j->...", dp, ginv, dp)
        lap = np.asarray(lap_phi_fn(t, pts), dtype=float)
        zv = np.asarray(inst.flow.z_field(t, pts), dtype=float)
        z_norm = np.sqrt(np.einsum("...i,...ij,...j->...", zv, gv, zv))
        k1 = inst.k1_bound(t)
        k2 = inst.k2_bound(t)
        term1 = (k1 * pv ** 2 - pv * lap + (d - 3) * grad_sq
                 + 2.0 * z_norm * pv * np.sqrt(grad_sq))
        out["k_phi1"] = max(out["k_phi1"], float(np.max(term1)))
        out["k_phi2"] = max(out["k_phi2"], k2)   # φ time-independent here
        # ‖φZ + (d−2)∇φ‖ with ∇φ the g-gradient (contravariant)
        gradv = np.einsum("...ij,...j->...i", ginv, dp)
        w = pv[..., None] * zv + (d - 2) * gradv
        w_norm = np.sqrt(np.einsum("...i,...ij,...j->...", w, gv, w))
        out["cross"] = max(out["cross"], float(np.max(w_norm)))
        out["grad_sup"] = max(out["grad_sup"], float(np.sqrt(np.max(grad_sq))))
    out["k_phi"] = (2.0 * out["k_phi1"] + 4.0 * out["cross"] * out["grad_sup"]
                    + 2.0 * d * out["grad_sup"] ** 2 + out["k_phi2"])
    return out


def conformal_instance(base: ModelInstance, phi_fn, dphi_fn) -> ModelInstance:
    """Wrap the base instance with g̃ = φ^{-2} g closures (conformally flat
    charts only: conformal_lambda must be available)."""
    if base.conformal_lambda is None:
        raise RuntimeFailure(f"{base.key} is not conformally flat in chart")
    cf = ConformalFactor(phi=phi_fn, dphi_dx=dphi_fn)
    flow = conformal_flow(base.flow, cf)

    def lam_t(t, x):
        return base.conformal_lambda(t, x) / np.asarray(phi_fn(t, x), dtype=float)

    def distance(t, x, y):
        mid = 0.5 * (x + y)
        return lam_t(t, mid) * np.linalg.norm(x - y, axis=-1)

    def unit_tangent(t, x, y):
        diff = y - x
        nn = np.linalg.norm(diff, axis=-1, keepdims=True)
        return diff / np.maximum(nn, 1e-300) / lam_t(t, x)[..., None]

    def transport_pair(t, x, y):
        ratio = lam_t(t, x) / lam_t(t, y)
        return ratio[..., None, None] * np.broadcast_to(
            np.eye(base.dim), x.shape[:-1] + (base.dim, base.dim))

    def project(t, x):
        if base.project is None:
            return x, np.zeros(x.shape[:-1])
        xn, _ = base.project(t, x)
        overshoot = np.linalg.norm(x - xn, axis=-1) / 2.0  # fold moved 2×
        wall = xn.copy()
        wall[..., -1] = 0.0
        return xn, np.where(overshoot > 0.0,
                            2.0 * overshoot * lam_t(t, wall), 0.0)

    def boundary_normal(t, x):
        nb = base.boundary_normal(t, x)
        return nb * np.asarray(phi_fn(t, x), dtype=float)[..., None]

    return ModelInstance(
        key=base.key + "+conformal", flow=flow,
        params=dict(base.params), convex=True, x0=base.x0,
        k_bound=base.k_bound, sigma_bound=lambda t: 0.0,
        k1_bound=base.k1_bound, k2_bound=base.k2_bound,
        rz_form=base.rz_form, ii_form=None,
        distance=distance, unit_tangent=unit_tangent,
        transport_pair=transport_pair, project=project,
        boundary_normal=boundary_normal,
        in_chart=base.in_chart, distance_drift_bound=None,
        conformal_lambda=lam_t,
    )


def check_phi_membership(base: ModelInstance, phi_fn, dphi_fn, t,
                         wall_pts, tol: float = 1e-6):
    """II(v,v) ≥ −N log φ at boundary probes (the 𝒟 membership test)."""
    ii = np.asarray(base.ii_form(t, wall_pts), dtype=float)
    # unit tangential at the wall: any g-unit vector orthogonal to N;
    # ii_form is isotropic on the catalog's walls, use its scalar
    gv = np.asarray(base.flow.g(t, wall_pts), dtype=float)
    ii_unit = ii[..., 0, 0] / gv[..., 0, 0]
    nch = base.boundary_normal(t, wall_pts)
    dp = np.asarray(dphi_fn(t, wall_pts), dtype=float)
    pv = np.asarray(phi_fn(t, wall_pts), dtype=float)
    nlogphi = np.einsum("...i,...i->...", nch, dp) / pv
    worst = float(np.min(ii_unit + nlogphi))
    if worst < -tol:
        raise PhiNotInD(f"II + N log φ = {worst:.4e} < 0 at a wall probe")
    return worst


def nonconvex_harnack(base: ModelInstance, p, x, y, S, T, n_paths, n_steps,
                      seed, sigma: Optional[float] = None, r0: float = 0.5,
                      k: float = 1.0, theta_h: float = 0.0,
                      f=None):
    """Harnack inequalities across a non-convex boundary via the conformal
    change g̃ = φ^{-2}g with the wall-collar profile φ."""
    amp = base.params.get("amp", 0.3)
    if sigma is None:
        sigma = 1.25 * amp
    prof, norm_inf, delta = phi_profile(r0, sigma, k, theta_h, base.dim)

    def phi_fn(t, pts):
        return prof(pts[..., -1])

    h = 1e-5

    def dphi_fn(t, pts):
        # centered stencil, nudged to r = h at the wall so it never clips
        out = np.zeros(pts.shape)
        rs = np.maximum(pts[..., -1], h)
        out[..., -1] = (prof(rs + h) - prof(rs - h)) / (2.0 * h)
        return out

    def lap_phi_fn(t, pts):
        # Δ_g φ for conformal g = λ²δ in 2-D: λ^{-2}·Δ₀φ
        rs = np.maximum(pts[..., -1], h)
        d2 = (prof(rs + h) - 2.0 * prof(rs) + prof(rs - h)) / h ** 2
        lam = base.conformal_lambda(t, pts)
        return d2 / lam ** 2

    wall = probe_points(base)
    wall = wall[np.abs(wall[..., -1]) < 1e-12]
    membership = check_phi_membership(base, phi_fn, dphi_fn, S, wall)

    terms = k_phi_terms(base, phi_fn, dphi_fn, lap_phi_fn, S, T)
    k_phi = terms["k_phi"]
    lam_T = 1.0 / norm_inf
    delta_T = 1.0 - 1.0 / norm_inf

    conf = conformal_instance(base, phi_fn, dphi_fn)

    def psi(t, pts):
        return 1.0 / np.asarray(phi_fn(t, pts), dtype=float)

    rep1, rep2, consts = variable_coeff_harnack(
        conf, psi, p, x, y, S, T, n_paths, n_steps, seed,
        k_hat=lambda t: k_phi, f=f)
    consts.update(terms)
    consts.update({"phi_norm": norm_inf, "delta": delta, "sigma": sigma,
                   "r0": r0, "membership_min": membership,
                   "lambda_T_theory": lam_T, "delta_T_theory": delta_T})
    return rep1, rep2, consts
