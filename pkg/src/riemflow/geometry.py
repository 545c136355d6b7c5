"""Time-dependent Riemannian geometry in a single coordinate chart.

All tensor fields are represented by their chart components.  Closures on
MetricFlow accept points of shape (..., d) and broadcast over leading
axes; everything downstream (curvature, transport, shooting) is built on
that convention.

Index conventions:
    g[..., i, j]          metric components g_ij
    dg_dx[..., i, j, k]   spatial partial  ∂_k g_ij
    dz_dx[..., i, j]      drift Jacobian   ∂_j Z^i
    gamma[..., k, i, j]   Christoffel      Γ^k_ij
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    DegeneratePair,
    NotOnBoundary,
    NotTangential,
    PhiBelowOne,
    ShootingNoConvergence,
    SingularMetric,
)

# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricFlow:
    """A family of metrics g(t, x) with drift Z and optional boundary.

    `boundary` is the defining function b with M = {b >= 0}; its
    euclidean gradient comes via `boundary_grad`.  `horizon` strictly
    bounds all simulation times.
    """

    dim: int
    g: Callable
    dg_dt: Callable
    dg_dx: Callable
    z_field: Callable
    dz_dx: Callable
    boundary: Optional[Callable] = None
    boundary_grad: Optional[Callable] = None
    horizon: float = np.inf
    debug_checks: bool = False


@dataclass(frozen=True)
class TangentVector:
    t: float
    x: np.ndarray
    components: np.ndarray

    def norm(self, flow: MetricFlow) -> float:
        gx = metric(flow, self.t, self.x)
        v = self.components
        return float(np.sqrt(max(v @ gx @ v, 0.0)))


@dataclass(frozen=True)
class BoundaryFrame:
    """Inward unit normal and tangential projector at a boundary point."""

    t: float
    x: np.ndarray
    normal: np.ndarray      # inward, |N|_t = 1
    projector: np.ndarray   # g_t-orthogonal projector onto N-perp


# ---------------------------------------------------------------------------
# metric evaluation helpers
# ---------------------------------------------------------------------------


def metric(flow: MetricFlow, t, x, check: bool = False):
    gx = np.asarray(flow.g(t, np.asarray(x, dtype=float)), dtype=float)
    if check or flow.debug_checks:
        try:
            np.linalg.cholesky(gx)
        except np.linalg.LinAlgError:
            raise SingularMetric(t, x)
    return gx


def inverse_metric(flow: MetricFlow, t, x):
    gx = metric(flow, t, x)
    try:
        return np.linalg.inv(gx)
    except np.linalg.LinAlgError:
        raise SingularMetric(t, x)


def inner(flow: MetricFlow, t, x, v, w):
    """g_t(v, w) at x; broadcasts over leading axes."""
    gx = metric(flow, t, x)
    return np.einsum("...i,...ij,...j->...", v, gx, w)


def g_norm(flow: MetricFlow, t, x, v):
    return np.sqrt(np.maximum(inner(flow, t, x, v, v), 0.0))


def orthonormal_frame(flow: MetricFlow, t, x):
    """Canonical frame u = g^{-1/2}, satisfying u^T g u = I."""
    gx = metric(flow, t, x)
    w, v = np.linalg.eigh(gx)
    if np.any(w <= 0):
        raise SingularMetric(t, x)
    return np.einsum("...ik,...k,...jk->...ij", v, 1.0 / np.sqrt(w), v)


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------


def christoffel(flow: MetricFlow, t, x):
    """Levi-Civita symbols Γ^k_ij of g_t, shape (..., d, d, d)."""
    ginv = inverse_metric(flow, t, x)
    dg = np.asarray(flow.dg_dx(t, np.asarray(x, dtype=float)), dtype=float)
    # dg[..., a, b, c] = ∂_c g_ab; Γ^k_ij = ½ g^{kl}(∂_i g_lj + ∂_j g_li − ∂_l g_ij)
    A = np.moveaxis(dg, -1, -3)              # A[..., c, a, b] = ∂_c g_ab
    bracket = (
        np.einsum("...ilj->...lij", A)
        + np.einsum("...jli->...lij", A)
        - np.einsum("...lij->...lij", A)
    )
    return 0.5 * np.einsum("...kl,...lij->...kij", ginv, bracket)


def _christoffel_fd_grad(flow: MetricFlow, t, x, h: float = 1e-4):
    """∂_m Γ^k_ij by central differences, shape (..., m, k, i, j)."""
    x = np.asarray(x, dtype=float)
    d = flow.dim
    out = []
    for m in range(d):
        e = np.zeros(d)
        e[m] = h
        out.append((christoffel(flow, t, x + e) - christoffel(flow, t, x - e)) / (2 * h))
    return np.stack(out, axis=-4)


def riemann(flow: MetricFlow, t, x, h: float = 1e-4):
    """Curvature tensor R^l_ijk with R(e_i,e_j)e_k = R^l_ijk e_l."""
    gam = christoffel(flow, t, x)
    dgam = _christoffel_fd_grad(flow, t, x, h)
    # R^l_ijk = ∂_i Γ^l_jk − ∂_j Γ^l_ik + Γ^l_im Γ^m_jk − Γ^l_jm Γ^m_ik
    r = (
        np.einsum("...iljk->...lijk", dgam)
        - np.einsum("...jlik->...lijk", dgam)
        + np.einsum("...lim,...mjk->...lijk", gam, gam)
        - np.einsum("...ljm,...mik->...lijk", gam, gam)
    )
    return r


def ricci(flow: MetricFlow, t, x, h: float = 1e-4):
    """Ricci tensor components Ric_jk (symmetrized against FD noise)."""
    r = riemann(flow, t, x, h)
    ric = np.einsum("...iijk->...jk", r)
    return 0.5 * (ric + np.swapaxes(ric, -1, -2))


def sectional_curvature(flow: MetricFlow, t, x, v, w, h: float = 1e-4):
    """K(v, w) for a non-degenerate pair of tangent vectors."""
    gx = metric(flow, t, x)
    r = riemann(flow, t, x, h)
    # ⟨R(v,w)w, v⟩ with R(v,w)w = R^a_klm v^k w^l w^m e_a
    rv = np.einsum("...aklm,...k,...l,...m->...a", r, v, w, w)
    num = np.einsum("...ab,...a,...b->...", gx, rv, v)
    vv = np.einsum("...i,...ij,...j->...", v, gx, v)
    ww = np.einsum("...i,...ij,...j->...", w, gx, w)
    vw = np.einsum("...i,...ij,...j->...", v, gx, w)
    return num / (vv * ww - vw**2)


def nabla_z(flow: MetricFlow, t, x):
    """Covariant drift Jacobian (∇Z)^k_i = ∂_i Z^k + Γ^k_il Z^l."""
    gam = christoffel(flow, t, x)
    z = np.asarray(flow.z_field(t, np.asarray(x, dtype=float)), dtype=float)
    dz = np.asarray(flow.dz_dx(t, np.asarray(x, dtype=float)), dtype=float)
    return np.swapaxes(dz, -1, -2) + np.einsum("...kil,...l->...ik", gam, z)
    # returned as [..., i, k]: derivative direction i, component k


def r_z_matrix(flow: MetricFlow, t, x, h: float = 1e-4):
    """Chart bilinear form M with  R^Z_t(v, v) = v^T M v.

    M = Ric − sym⟨∇Z, ·⟩ − ½ ∂_t g, all in chart components.
    """
    gx = metric(flow, t, x)
    ric = ricci(flow, t, x, h)
    nz = nabla_z(flow, t, x)                       # [..., i, k]
    zterm = np.einsum("...ik,...kj->...ij", nz, gx)
    zsym = 0.5 * (zterm + np.swapaxes(zterm, -1, -2))
    dgt = np.asarray(flow.dg_dt(t, np.asarray(x, dtype=float)), dtype=float)
    return ric - zsym - 0.5 * dgt


def r_z(flow: MetricFlow, t, x, v, h: float = 1e-4):
    """R^Z_t(v,v) = Ric(v,v) − ⟨∇_v Z, v⟩_t − ½ ∂_t g(v,v)."""
    if isinstance(v, TangentVector):
        v = v.components
    m = r_z_matrix(flow, t, x, h)
    return np.einsum("...i,...ij,...j->...", v, m, v)


# ---------------------------------------------------------------------------
# boundary geometry
# ---------------------------------------------------------------------------


def normal_field(flow: MetricFlow, t, x):
    """Inward g_t-unit normal (extended off the boundary by the same formula)."""
    if flow.boundary is None:
        raise NotOnBoundary("flow has no boundary")
    grad_b = np.asarray(flow.boundary_grad(np.asarray(x, dtype=float)), dtype=float)
    ginv = inverse_metric(flow, t, x)
    n = np.einsum("...ij,...j->...i", ginv, grad_b)
    nn = np.sqrt(np.einsum("...i,...ij,...j->...", n, metric(flow, t, x), n))
    return n / nn[..., None]


def normal_frame(flow: MetricFlow, t, x, tol: float = 1e-10) -> BoundaryFrame:
    x = np.asarray(x, dtype=float)
    if flow.boundary is None or abs(float(flow.boundary(x))) > tol:
        raise NotOnBoundary(f"x={x} is not on the boundary")
    n = normal_field(flow, t, x)
    gx = metric(flow, t, x)
    proj = np.eye(flow.dim) - np.outer(n, gx @ n)
    return BoundaryFrame(t=t, x=x, normal=n, projector=proj)


def second_fundamental_form(flow: MetricFlow, t, x, v, w, h: float = 1e-6):
    """II_t(v, w) = −⟨∇_v N, w⟩_t for tangential v, w at x ∈ ∂M."""
    if isinstance(v, TangentVector):
        v = v.components
    if isinstance(w, TangentVector):
        w = w.components
    frame = normal_frame(flow, t, x)
    gx = metric(flow, t, x)
    n = frame.normal
    if abs(float(v @ gx @ n)) > 1e-8 or abs(float(w @ gx @ n)) > 1e-8:
        raise NotTangential("v, w must be g_t-orthogonal to the normal")
    # directional derivative of the extended normal field along v
    dn = (normal_field(flow, t, x + h * v) - normal_field(flow, t, x - h * v)) / (2 * h)
    gam = christoffel(flow, t, x)
    cov = dn + np.einsum("kij,i,j->k", gam, v, n)
    return -float(cov @ gx @ w)


# ---------------------------------------------------------------------------
# geodesics, transport, mirror
# ---------------------------------------------------------------------------


def _geodesic_rhs(flow, t, x, v):
    gam = christoffel(flow, t, x)
    return v, -np.einsum("kij,i,j->k", gam, v, v)


def _integrate_geodesic(flow, t, x0, v0, n_seg):
    """RK4 integration of the geodesic equation; returns node positions
    and velocities over affine parameter [0, 1]."""
    ds = 1.0 / n_seg
    xs = np.empty((n_seg + 1, flow.dim))
    vs = np.empty((n_seg + 1, flow.dim))
    x, v = np.array(x0, dtype=float), np.array(v0, dtype=float)
    xs[0], vs[0] = x, v
    for i in range(n_seg):
        k1x, k1v = _geodesic_rhs(flow, t, x, v)
        k2x, k2v = _geodesic_rhs(flow, t, x + 0.5 * ds * k1x, v + 0.5 * ds * k1v)
        k3x, k3v = _geodesic_rhs(flow, t, x + 0.5 * ds * k2x, v + 0.5 * ds * k2v)
        k4x, k4v = _geodesic_rhs(flow, t, x + ds * k3x, v + ds * k3v)
        x = x + ds / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + ds / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        xs[i + 1], vs[i + 1] = x, v
    return xs, vs


def geodesic_shoot(flow: MetricFlow, t, x, y, n_seg: int = 64,
                   tol: float = 1e-8, max_iter: int = 60):
    """Two-point geodesic by damped Newton on the initial velocity.

    Returns (node positions (n_seg+1, d), node velocities).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = flow.dim
    v0 = y - x                      # chart straight line initialization
    scale = max(np.linalg.norm(v0), 1e-12)
    for _ in range(max_iter):
        xs, vs = _integrate_geodesic(flow, t, x, v0, n_seg)
        r = xs[-1] - y
        if np.linalg.norm(r) <= tol * max(1.0, scale):
            return xs, vs
        # finite-difference Jacobian of the endpoint w.r.t. v0
        jac = np.empty((d, d))
        dh = 1e-6 * max(scale, 1.0)
        for k in range(d):
            e = np.zeros(d)
            e[k] = dh
            xp, _ = _integrate_geodesic(flow, t, x, v0 + e, n_seg)
            jac[:, k] = (xp[-1] - xs[-1]) / dh
        try:
            step = np.linalg.solve(jac, r)
        except np.linalg.LinAlgError:
            raise ShootingNoConvergence(f"singular shooting Jacobian at t={t}")
        # damped update
        lam = 1.0
        base = np.linalg.norm(r)
        while lam > 1e-4:
            xs2, _ = _integrate_geodesic(flow, t, x, v0 - lam * step, n_seg)
            if np.linalg.norm(xs2[-1] - y) < base:
                break
            lam *= 0.5
        v0 = v0 - lam * step
    raise ShootingNoConvergence(
        f"no geodesic convergence from {x} to {y} at t={t}")


def curve_length(flow: MetricFlow, t, xs):
    """Discrete g_t-length of a polyline (midpoint metric evaluation)."""
    xs = np.asarray(xs, dtype=float)
    seg = np.diff(xs, axis=0)
    mid = 0.5 * (xs[:-1] + xs[1:])
    gm = metric(flow, t, mid)
    return float(np.sum(np.sqrt(np.maximum(
        np.einsum("si,sij,sj->s", seg, gm, seg), 0.0))))


def geodesic_distance(flow: MetricFlow, t, x, y, n_seg: int = 64):
    """(ρ_t(x,y), minimizing polyline)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.allclose(x, y, atol=1e-14):
        return 0.0, np.stack([x, y])
    xs, _ = geodesic_shoot(flow, t, x, y, n_seg)
    return curve_length(flow, t, xs), xs


def parallel_transport(flow: MetricFlow, t, xs, v):
    """Transport v along the polyline xs by RK4 on v̇ = −Γ(γ)(γ̇, v)."""
    xs = np.asarray(xs, dtype=float)
    v = np.array(v, dtype=float)
    n_seg = xs.shape[0] - 1
    for i in range(n_seg):
        a, b = xs[i], xs[i + 1]
        dx = b - a      # γ̇ ds over the segment

        def rhs(pos, vec):
            gam = christoffel(flow, t, pos)
            return -np.einsum("kij,i,j->k", gam, dx, vec)

        k1 = rhs(a, v)
        k2 = rhs(0.5 * (a + b), v + 0.5 * k1)
        k3 = rhs(0.5 * (a + b), v + 0.5 * k2)
        k4 = rhs(b, v + k3)
        v = v + (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return v


def mirror_map(flow: MetricFlow, t, x, y, v, geodesic=None):
    """M v = P v − 2⟨v, γ̇(x)⟩_t γ̇(y), the mirror isometry T_x → T_y."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    if geodesic is None:
        rho, xs = geodesic_distance(flow, t, x, y)
    else:
        xs = np.asarray(geodesic, dtype=float)
        rho = curve_length(flow, t, xs)
    if rho < 1e-12:
        return v.copy()       # degenerate pair: the map is the identity
    xs2, vs = geodesic_shoot(flow, t, x, y)
    gdot_x = vs[0] / g_norm(flow, t, x, vs[0])
    gdot_y = vs[-1] / g_norm(flow, t, y, vs[-1])
    pv = parallel_transport(flow, t, xs2, v)
    return pv - 2.0 * inner(flow, t, x, v, gdot_x) * gdot_y


# ---------------------------------------------------------------------------
# index form
# ---------------------------------------------------------------------------


def _frame_along(flow, t, xs, vs):
    """Orthonormal frame {γ̇/|γ̇|, E_2, ..., E_d} parallel along γ.

    Returns (frames (n+1, d, d) with columns = frame vectors, speed)."""
    d = flow.dim
    speed = g_norm(flow, t, xs[0], vs[0])
    e1 = vs[0] / speed
    # complete to a g-orthonormal basis at the start by Gram-Schmidt
    basis = [e1]
    for k in range(d):
        cand = np.zeros(d)
        cand[k] = 1.0
        for b in basis:
            cand = cand - inner(flow, t, xs[0], cand, b) * b
        nn = g_norm(flow, t, xs[0], cand)
        if nn > 1e-8:
            basis.append(cand / nn)
        if len(basis) == d:
            break
    n = xs.shape[0]
    frames = np.empty((n, d, d))
    for j, b in enumerate(basis):
        vcur = b
        frames[0][:, j] = b
        for i in range(1, n):
            vcur = parallel_transport(flow, t, xs[i - 1:i + 1], vcur)
            frames[i][:, j] = vcur
    return frames, speed


def index_z(flow: MetricFlow, t, x, y, n_seg: int = 64, h: float = 1e-4):
    """Σ_i I(J_i, J_i) + Zρ(·,y)(x) + Zρ(x,·)(y) along the x→y geodesic.

    Jacobi fields are solved as a linear BVP in a parallel frame, unit at
    both endpoints and orthogonal to γ̇; in d=1 the sum is empty.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xs, vs = geodesic_shoot(flow, t, x, y, n_seg)
    rho = curve_length(flow, t, xs)
    if rho < 1e-12:
        return 0.0
    d = flow.dim
    # Z-terms: ∇ρ(·,y)(x) = −γ̇(x), ∇ρ(x,·)(y) = +γ̇(y) (unit speed)
    gdot_x = vs[0] / g_norm(flow, t, x, vs[0])
    gdot_y = vs[-1] / g_norm(flow, t, y, vs[-1])
    zx = np.asarray(flow.z_field(t, x), dtype=float)
    zy = np.asarray(flow.z_field(t, y), dtype=float)
    total = -inner(flow, t, x, zx, gdot_x) + inner(flow, t, y, zy, gdot_y)
    if d == 1:
        return float(total)

    frames, speed = _frame_along(flow, t, xs, vs)
    n = xs.shape[0]
    ds = rho / (n - 1)
    # curvature matrix in the parallel frame: R_ab(s) = ⟨R(E_a, γ̇)γ̇, E_b⟩, a,b ≥ 2
    m = d - 1
    rmat = np.empty((n, m, m))
    for i in range(n):
        gx = metric(flow, t, xs[i])
        rt = riemann(flow, t, xs[i], h)
        e1 = frames[i][:, 0]
        for a in range(m):
            ja = frames[i][:, a + 1]
            rj = np.einsum("lijk,i,j,k->l", rt, ja, e1, e1)
            for b in range(m):
                rmat[i, a, b] = frames[i][:, b + 1] @ gx @ rj
    rmat = 0.5 * (rmat + np.swapaxes(rmat, -1, -2))

    # linear BVP j'' = −R(s) j with j(0) = j(ρ) = I (m×m matrix solution)
    def propagate(j0, jp0):
        j, jp = j0.copy(), jp0.copy()
        traj = [j.copy()]
        dtraj = [jp.copy()]
        for i in range(n - 1):
            # midpoint (RK2) is ample at these resolutions
            rm0 = rmat[i]
            rmh = 0.5 * (rmat[i] + rmat[i + 1])
            jm = j + 0.5 * ds * jp
            jpm = jp - 0.5 * ds * rm0 @ j
            j = j + ds * jpm
            jp = jp - ds * rmh @ jm
            traj.append(j.copy())
            dtraj.append(jp.copy())
        return np.array(traj), np.array(dtraj)

    ja, jap = propagate(np.eye(m), np.zeros((m, m)))
    jb, jbp = propagate(np.zeros((m, m)), np.eye(m))
    # choose C with ja_end + jb_end C = I  →  matrix field J = Ja + Jb C
    c = np.linalg.solve(jb[-1], np.eye(m) - ja[-1])
    jfield = ja + np.einsum("nab,bc->nac", jb, c)
    jprime = jap + np.einsum("nab,bc->nac", jbp, c)

    # I(J,J) = ∫ |J'|² − ⟨R J, J⟩ ds summed over the m columns
    integrand = (
        np.einsum("nab,nab->n", jprime, jprime)
        - np.einsum("nab,nac,ncb->n", jfield, rmat, jfield)
    )
    total += float(np.trapz(integrand, dx=ds))
    return float(total)


# ---------------------------------------------------------------------------
# conformal change
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConformalFactor:
    """φ(t, x) ≥ 1 with derivative closures (finite differences if omitted)."""

    phi: Callable
    dphi_dt: Optional[Callable] = None
    dphi_dx: Optional[Callable] = None
    h: float = 1e-5

    def value(self, t, x):
        return np.asarray(self.phi(t, np.asarray(x, dtype=float)), dtype=float)

    def dt(self, t, x):
        if self.dphi_dt is not None:
            return np.asarray(self.dphi_dt(t, np.asarray(x, dtype=float)), dtype=float)
        return (self.value(t + self.h, x) - self.value(t - self.h, x)) / (2 * self.h)

    def dx(self, t, x):
        if self.dphi_dx is not None:
            return np.asarray(self.dphi_dx(t, np.asarray(x, dtype=float)), dtype=float)
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        cols = []
        for k in range(d):
            e = np.zeros(d)
            e[k] = self.h
            cols.append((self.value(t, x + e) - self.value(t, x - e)) / (2 * self.h))
        return np.stack(cols, axis=-1)


def conformal_flow(flow: MetricFlow, phi: ConformalFactor) -> MetricFlow:
    """The flow with g̃ = φ^{-2} g and the drift that preserves the
    generator identity L = φ^{-2}(Δ̃ + Z̃):

        Z̃ = φ² Z + (d−2)/2 ∇φ²   (gradient w.r.t. g).
    """
    d = flow.dim

    def _phi_checked(t, x):
        p = phi.value(t, x)
        if np.any(p < 1.0 - 1e-12):
            raise PhiBelowOne(f"min φ = {np.min(p)} at t={t}")
        return p

    def g_new(t, x):
        p = _phi_checked(t, x)
        return flow.g(t, x) / (p**2)[..., None, None]

    def dg_dt_new(t, x):
        p = _phi_checked(t, x)
        pt = phi.dt(t, x)
        return (flow.dg_dt(t, x) / (p**2)[..., None, None]
                - 2.0 * (pt / p**3)[..., None, None] * flow.g(t, x))

    def dg_dx_new(t, x):
        p = _phi_checked(t, x)
        px = phi.dx(t, x)                     # (..., k)
        base = flow.dg_dx(t, x)
        gx = flow.g(t, x)
        return (base / (p**2)[..., None, None, None]
                - 2.0 * np.einsum("...k,...ij->...ijk",
                                  px / (p**3)[..., None], gx))

    def z_new(t, x):
        p = _phi_checked(t, x)
        px = phi.dx(t, x)
        ginv = np.linalg.inv(np.asarray(flow.g(t, x), dtype=float))
        grad_phi = np.einsum("...ij,...j->...i", ginv, px)
        return ((p**2)[..., None] * flow.z_field(t, x)
                + (d - 2) * p[..., None] * grad_phi)

    def dz_new(t, x, h=1e-5):
        x = np.asarray(x, dtype=float)
        cols = []
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            cols.append((z_new(t, x + e) - z_new(t, x - e)) / (2 * h))
        return np.stack(cols, axis=-1)

    return MetricFlow(
        dim=d, g=g_new, dg_dt=dg_dt_new, dg_dx=dg_dx_new,
        z_field=z_new, dz_dx=dz_new,
        boundary=flow.boundary, boundary_grad=flow.boundary_grad,
        horizon=flow.horizon, debug_checks=flow.debug_checks,
    )


def apply_generator(flow: MetricFlow, t, f, x, h: float = 1e-5):
    """(Δ_t + Z_t) f at x by finite differences — generator probe tool."""
    x = np.asarray(x, dtype=float)
    d = flow.dim
    f0 = f(x)
    grad = np.empty(d)
    hess = np.empty((d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        grad[i] = (f(x + ei) - f(x - ei)) / (2 * h)
        hess[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h**2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h
            hess[i, j] = hess[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4 * h**2)
    ginv = inverse_metric(flow, t, x)
    gam = christoffel(flow, t, x)
    lap = np.einsum("ij,ij->", ginv, hess) - np.einsum(
        "ij,kij,k->", ginv, gam, grad)
    z = np.asarray(flow.z_field(t, x), dtype=float)
    return float(lap + z @ grad)
