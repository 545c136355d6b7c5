"""Damping matrices and probabilistic gradient representations.

Along each reflecting path a matrix Q (started at the identity, expressed
in the moving frame) is damped by the curvature form R^Z in the interior
and by the second fundamental form on boundary contact, with its range
projected against the inward normal at every wall touch.  The operator
norm of Q never exceeds the running certificate exp(−∫K dr − ∫σ dl),
which is asserted on every step.

Two Monte-Carlo representations of the frame components of ∇^s P_{s,t}f
are provided: the endpoint form E[Qᵀ u_t^{-1}∇f(X_t)] and the integral
form (1/√2)·E[f(X_t)·∫ h'(r) Qᵀ dB_r] for a ramp h, plus a localized
variant that stops at the exit of a space-time box and substitutes inner
semigroup values.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .catalog import ModelInstance
from .diffusion import EnsembleCursor, MAX_RESAMPLE, run_chunked, _fixed_order_mean
from .errors import DomainDegenerate, NestedBudgetExceeded, RuntimeFailure
from .oracle import Grid1D, grid_value
from .rng import counter_uniform

# ---------------------------------------------------------------------------
# Q-process
# ---------------------------------------------------------------------------


@dataclass
class QMatrix:
    q: np.ndarray            # (n, d, d) frame-coordinate damping matrices
    certificate: np.ndarray  # (n,) running norm bound


def identity_q(n, d):
    return QMatrix(q=np.broadcast_to(np.eye(d), (n, d, d)).copy(),
                   certificate=np.ones(n))


def operator_norm(q):
    """Batched spectral norm; closed form in d ≤ 2."""
    d = q.shape[-1]
    if d == 1:
        return np.abs(q[..., 0, 0])
    m = np.einsum("...ki,...kj->...ij", q, q)
    if d == 2:
        tr = m[..., 0, 0] + m[..., 1, 1]
        det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
        disc = np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0))
        return np.sqrt(np.maximum(0.5 * (tr + disc), 0.0))
    return np.linalg.norm(q, ord=2, axis=(-2, -1))


def q_step(inst: ModelInstance, qm: QMatrix, t, x, u, dt, dl, hit,
           check: bool = True) -> QMatrix:
    """One damping update in the frame u at (t, x); dl, hit from the
    diffusion step that produced the displacement."""
    rz_chart = inst.rz_form(t, x)
    rz_frame = np.einsum("...ia,...ij,...jb->...ab", u, rz_chart, u)
    q = qm.q - np.einsum("...ab,...bc->...ac", rz_frame, qm.q) * dt

    cert = qm.certificate * np.exp(-inst.k_bound(t) * dt)

    if np.any(hit):
        nch = inst.boundary_normal(t, x)                     # unit inward, chart
        gx = np.asarray(inst.flow.g(t, x), dtype=float)
        ncov = np.einsum("...ij,...j->...i", gx, nch)
        nhat = np.einsum("...ia,...i->...a", u, ncov)        # frame components
        proj = np.eye(u.shape[-1]) - np.einsum("...a,...b->...ab", nhat, nhat)
        ii_chart = inst.ii_form(t, x)
        ii_u = np.einsum("...ia,...ij,...jb->...ab", u, ii_chart, u)
        ii_frame = np.einsum("...ab,...bc,...cd->...ad", proj, ii_u, proj)
        q_hit = q - np.einsum("...ab,...bc->...ac", ii_frame, q) * dl[..., None, None]
        q_hit = np.einsum("...ab,...bc->...ac", proj, q_hit)
        q = np.where(hit[..., None, None], q_hit, q)
        cert = cert * np.exp(-inst.sigma_bound(t) * np.where(hit, dl, 0.0))

    out = QMatrix(q=q, certificate=cert)
    if check:
        assert_certificate(out)
    return out


def assert_certificate(qm: QMatrix, tol: float = 1e-8):
    norms = operator_norm(qm.q)
    worst = float(np.max(norms - qm.certificate))
    if worst > tol:
        raise RuntimeFailure(f"Q-norm certificate violated by {worst:.3e}")


# ---------------------------------------------------------------------------
# ramps
# ---------------------------------------------------------------------------


def linear_ramp(s, t):
    span = t - s

    def h_prime(r):
        return 1.0 / span
    return h_prime


def cubic_ramp(s, t):
    span = t - s

    def h_prime(r):
        w = (r - s) / span
        return 6.0 * w * (1.0 - w) / span
    return h_prime


def plateau_ramp(s, t, frac: float = 0.25):
    """Smooth ramp reaching 1 at s + frac·(t−s), flat afterwards."""
    span = frac * (t - s)
    t_end = s + span

    def h_prime(r):
        w = np.clip((r - s) / span, 0.0, 1.0)
        return np.where(r < t_end, 6.0 * w * (1.0 - w) / span, 0.0)
    return h_prime


# ---------------------------------------------------------------------------
# chunked path functionals with chart-exit resampling
# ---------------------------------------------------------------------------


def q_path_functional(inst, x0, s, t, n_steps, seed, path_indices,
                      per_step: Optional[Callable] = None,
                      psi=None, stream_offset: int = 0):
    """Run paths with an attached Q-process; per_step(carry, cursor, info,
    qm) mutates a caller-owned accumulator dict.  Returns (x, u, qm, carry
    arrays, ok mask, max certificate)."""
    dt = (t - s) / n_steps
    idx = np.asarray(path_indices, dtype=np.uint64)
    n = len(idx)
    d = inst.dim

    def run(sub_idx, offset):
        cur = EnsembleCursor(inst, x0, s, dt, n_steps,
                             sub_idx + np.uint64(offset), seed, psi=psi)
        qm = identity_q(len(sub_idx), d)
        carry = {"acc": np.zeros((len(sub_idx), d)),
                 "cert_max": np.ones(len(sub_idx))}
        for k in range(n_steps):
            t_k = cur.t
            wprev = None
            if inst.wall_distance is not None:
                wprev = inst.wall_distance(t_k, cur.x)
            info = cur.step()
            if per_step is not None:
                per_step(carry, t_k, info, qm, dt)
            hit = info.hit
            if wprev is not None:
                # Brownian-bridge wall touches missed by endpoint tests:
                # crossing probability exp(−d₀d₁/(ψ²Δt)) for the normal
                # coordinate diffusing at speed √2·ψ
                wnew = inst.wall_distance(cur.t, cur.x)
                p2 = 1.0
                if psi is not None:
                    p2 = np.asarray(psi(t_k, info.x_prev), dtype=float) ** 2
                p_hit = np.exp(-np.maximum(wprev, 0.0)
                               * np.maximum(wnew, 0.0) / (p2 * dt))
                uni = counter_uniform(seed, cur.path_indices,
                                      np.uint64(k), np.uint64(d + 3))
                hit = hit | (~info.hit & (uni < p_hit))
            qm = q_step(inst, qm, t_k, cur.x, cur.u, dt, info.dl, hit,
                        check=False)
            # enforce the norm certificate only on paths still inside the
            # chart; escaped paths carry garbage frames and get resampled
            live = ~cur.bad
            if np.any(live):
                assert_certificate(QMatrix(q=qm.q[live],
                                           certificate=qm.certificate[live]))
            carry["cert_max"] = np.maximum(carry["cert_max"], qm.certificate)
        return cur, qm, carry

    cur, qm, carry = run(idx, stream_offset)
    bad = cur.bad.copy()
    retry = 1
    while np.any(bad) and retry <= MAX_RESAMPLE:
        sel = np.where(bad)[0]
        c2, q2, k2 = run(idx[sel], stream_offset + retry * (1 << 40))
        good2 = ~c2.bad
        tgt = sel[good2]
        cur.x[tgt] = c2.x[good2]
        cur.u[tgt] = c2.u[good2]
        cur.l[tgt] = c2.l[good2]
        qm.q[tgt] = q2.q[good2]
        qm.certificate[tgt] = q2.certificate[good2]
        for key in carry:
            carry[key][tgt] = k2[key][good2]
        bad[tgt] = False
        retry += 1
    return cur, qm, carry, ~bad


def _mean_and_stderr(values, ok, n_paths):
    n_badpaths = int(np.sum(~ok))
    if n_badpaths > max(1, n_paths // 1000):
        raise RuntimeFailure(
            f"{n_badpaths}/{n_paths} paths failed chart containment")
    sel = values[ok]
    mean = _fixed_order_mean(sel)
    stderr = np.std(sel, axis=0, ddof=1) / math.sqrt(len(sel))
    return mean, stderr


# ---------------------------------------------------------------------------
# gradient representations
# ---------------------------------------------------------------------------


def bismut_gradient(inst: ModelInstance, f, s, t, x, n_paths, n_steps,
                    seed, h_prime=None, n_workers: int = 1, psi=None):
    """Frame components of ∇^s P_{s,t}f(x) via the stochastic-integral
    representation.  Returns (vector, stderr vector)."""
    if h_prime is None:
        h_prime = linear_ramp(s, t)
    d = inst.dim
    sq_dt = math.sqrt((t - s) / n_steps)

    def per_step(carry, t_k, info, qm, dt):
        # ∫ h'(r) Qᵀ dB with dB = ξ √Δt
        carry["acc"] += h_prime(t_k) * sq_dt * np.einsum(
            "...ba,...b->...a", qm.q, info.xi)

    def chunk_fn(indices):
        cur, qm, carry, ok = q_path_functional(
            inst, x, s, t, n_steps, seed, indices, per_step, psi=psi)
        fv = np.asarray(f(cur.x), dtype=float)
        vals = (1.0 / math.sqrt(2.0)) * fv[:, None] * carry["acc"]
        return vals, ok

    values, ok = run_chunked(n_paths, chunk_fn, n_workers, out_width=d)
    return _mean_and_stderr(values, ok, n_paths)


def covariant_gradient(inst: ModelInstance, grad_f, s, t, x, n_paths,
                       n_steps, seed, n_workers: int = 1, psi=None):
    """Frame components of ∇^s P_{s,t}f(x) via the endpoint form
    E[Qᵀ u_t^{-1} ∇^t f(X_t)].  grad_f(t, x) returns the chart gradient
    (contravariant components)."""
    d = inst.dim

    def chunk_fn(indices):
        cur, qm, carry, ok = q_path_functional(
            inst, x, s, t, n_steps, seed, indices, psi=psi)
        gf = np.asarray(grad_f(cur.t, cur.x), dtype=float)
        a = np.linalg.solve(cur.u, gf[..., None])[..., 0]   # u^{-1} ∇f
        vals = np.einsum("...ba,...b->...a", qm.q, a)
        return vals, ok

    values, ok = run_chunked(n_paths, chunk_fn, n_workers, out_width=d)
    return _mean_and_stderr(values, ok, n_paths)


# ---------------------------------------------------------------------------
# localized representation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpaceTimeBox:
    t_hi: float                 # temporal face (exit when r ≥ t_hi)
    lo: np.ndarray              # spatial box, per-dimension bounds
    hi: np.ndarray

    def contains(self, x):
        return np.all((x > self.lo) & (x < self.hi), axis=-1)


def local_bismut_gradient(inst: ModelInstance, f, s, t, x, box: SpaceTimeBox,
                          n_paths, n_steps, seed, plateau_frac: float = 0.25,
                          inner_table=None, inner_budget: int = 10**7,
                          n_workers: int = 1):
    """Stopped-path variant: paths are frozen at the first exit of the
    space-time box and the endpoint functional becomes the inner
    semigroup value P_{τ,t}f(X_τ).

    inner_table: (times, slices, Grid1D) from the 1-D oracle; when None
    the inner values come from nested Monte Carlo under inner_budget.
    """
    x_arr = np.asarray(x, dtype=float)
    if not bool(box.contains(x_arr)) or not (s < box.t_hi):
        raise DomainDegenerate("start point must be interior to the box")
    h_prime = plateau_ramp(s, min(t, box.t_hi), plateau_frac)
    d = inst.dim
    dt = (t - s) / n_steps
    sq_dt = math.sqrt(dt)

    def chunk_fn(indices):
        idx = np.asarray(indices, dtype=np.uint64)
        cur = EnsembleCursor(inst, x_arr, s, dt, n_steps, idx, seed)
        n = len(idx)
        qm = identity_q(n, d)
        acc = np.zeros((n, d))
        stopped = np.zeros(n, dtype=bool)
        tau = np.full(n, t)
        x_tau = np.tile(x_arr, (n, 1))
        early = np.zeros(n, dtype=bool)      # exited before the ramp plateau
        for k in range(n_steps):
            t_k = cur.t
            info = cur.step(freeze=stopped)
            live = ~stopped
            acc[live] += (h_prime(t_k) * sq_dt *
                          np.einsum("...ba,...b->...a", qm.q[live], info.xi[live]))
            qm = q_step(inst, qm, t_k, cur.x, cur.u, dt, info.dl, info.hit)
            exits = live & (~box.contains(cur.x) | (cur.t >= box.t_hi - 1e-12))
            if np.any(exits) and cur.t < t - 1e-12:
                tau[exits] = cur.t
                x_tau[exits] = cur.x[exits]
                early |= exits & (h_prime(cur.t) > 0.0)
                stopped |= exits
        alive = ~stopped
        tau[alive] = t
        x_tau[alive] = cur.x[alive]
        inner = _inner_values(inst, f, x_tau, tau, t, stopped, inner_table,
                              inner_budget, seed)
        vals = (1.0 / math.sqrt(2.0)) * inner[:, None] * acc
        diag = {"stopped_frac": float(np.mean(stopped)),
                "early_exit_frac": float(np.mean(early))}
        return vals, ~cur.bad, diag

    # run_chunked expects a 2-tuple; close over a diagnostics list instead
    diags = []

    def wrapped(indices):
        v, ok, dg = chunk_fn(indices)
        diags.append(dg)
        return v, ok

    values, ok = run_chunked(n_paths, wrapped, n_workers, out_width=d)
    mean, stderr = _mean_and_stderr(values, ok, n_paths)
    summary = {k: float(np.mean([dgi[k] for dgi in diags])) for k in diags[0]}
    return mean, stderr, summary


def _inner_values(inst, f, x_tau, tau, t, stopped, inner_table, budget, seed):
    """P_{τ,t} f(X_τ) for the stopped paths, f(X_t) for the rest."""
    out = np.empty(len(tau))
    live = ~stopped
    out[live] = np.asarray(f(x_tau[live]), dtype=float)
    if not np.any(stopped):
        return out
    idx = np.where(stopped)[0]
    if inner_table is not None:
        times, slices, grid = inner_table
        for i in idx:
            j = int(np.argmin(np.abs(times - tau[i])))
            out[i] = float(grid_value(slices[j], grid, float(x_tau[i, 0])))
        return out
    # nested Monte Carlo
    from .diffusion import mc_semigroup
    inner_paths = 256
    inner_steps = 64
    if len(idx) * inner_paths * inner_steps > budget:
        raise NestedBudgetExceeded(
            f"nested MC cost {len(idx) * inner_paths * inner_steps} > {budget}")
    for i in idx:
        est, _ = mc_semigroup(inst, f, tau[i], t, x_tau[i],
                              inner_paths, inner_steps, seed ^ 0xA5A5)
        out[i] = est
    return out


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def gradient_report_rows(instance_key, s, t, x, estimator, vec, stderr,
                         cert_max=1.0):
    rows = []
    xs = ";".join(repr(v) for v in np.atleast_1d(x))
    for i, (v, e) in enumerate(zip(np.atleast_1d(vec), np.atleast_1d(stderr))):
        rows.append([instance_key, repr(s), repr(t), xs, estimator,
                     str(i), repr(float(v)), repr(float(e)), repr(float(cert_max))])
    return rows
