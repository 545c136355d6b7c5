"""Model manifold catalog.

Each instance bundles a MetricFlow with fast vectorized closures
(distance, transports, reflection, curvature forms) and the closed-form
constants (K, σ, K₁, K₂) that the estimates need.  All closures accept
batched points of shape (n, d) so the samplers never loop in Python.

Shipped instances:
    interval-exp        [0,1], g_t = e^{2at} dx², optional constant drift
    scaled-disk         unit disk, g_t = c(t)² δ, c linear in t
    ricciflow-capband   polar band on S² with g_t = (1-2t) g_{S²}
    halfplane-bump      {x₂ ≥ 0} with a conformal bump making ∂M concave
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError
from .geometry import MetricFlow

# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelInstance:
    """A catalog manifold with fast closures and exact constants.

    k_bound(t): lower bound K(t) with R^Z_t ≥ K(t) on unit vectors.
    sigma_bound(t): lower bound σ(t) with II_t ≥ σ(t) (0 without boundary).
    k1_bound(t), k2_bound(t): Ric^Z ≥ −K₁(t) and ∂_t g ≤ K₂(t).
    rz_form / ii_form: chart bilinear forms, shape (n, d, d).
    transport_pair: parallel transport matrix T_x → T_y, shape (n, d, d).
    project: reflect a proposal into M̄, returning (x, dl).
    distance_drift_bound(t, rho): the deterministic integrand bounding
        dρ/dt for displacement couplings (None on non-convex instances).
    """

    key: str
    flow: MetricFlow
    params: dict
    convex: bool
    x0: np.ndarray
    k_bound: Callable
    sigma_bound: Callable
    k1_bound: Callable
    k2_bound: Callable
    rz_form: Callable
    distance: Callable
    unit_tangent: Callable
    transport_pair: Callable
    in_chart: Callable
    ii_form: Optional[Callable] = None
    project: Optional[Callable] = None
    boundary_normal: Optional[Callable] = None
    distance_drift_bound: Optional[Callable] = None
    conformal_lambda: Optional[Callable] = None   # when g = λ(t,x)² δ
    wall_distance: Optional[Callable] = None      # g_t-distance to ∂M

    @property
    def dim(self):
        return self.flow.dim

    def mirror_pair(self, t, x, y):
        """Mirror transform matrix M v = P v − 2⟨v, γ̇(x)⟩_t γ̇(y)."""
        tp = self.transport_pair(t, x, y)
        tx = self.unit_tangent(t, x, y)            # γ̇ at x (toward y)
        ty = -self.unit_tangent(t, y, x)           # γ̇ at y (away from x)
        gx = self.flow.g(t, x)
        cov = np.einsum("...ij,...j->...i", gx, tx)
        return tp - 2.0 * np.einsum("...i,...j->...ij", ty, cov)


# ---------------------------------------------------------------------------
# interval-exp
# ---------------------------------------------------------------------------


def interval_exp(a: float = 0.5, z0: float = 0.0, horizon: float = 10.0) -> ModelInstance:
    """[0,1] with g_t = e^{2at} dx² and optional constant drift z0."""

    def g(t, x):
        return np.full(x.shape[:-1] + (1, 1), math.exp(2 * a * t))

    def dg_dt(t, x):
        return np.full(x.shape[:-1] + (1, 1), 2 * a * math.exp(2 * a * t))

    def dg_dx(t, x):
        return np.zeros(x.shape[:-1] + (1, 1, 1))

    def z_field(t, x):
        return np.full(x.shape[:-1] + (1,), z0)

    def dz_dx(t, x):
        return np.zeros(x.shape[:-1] + (1, 1))

    flow = MetricFlow(
        dim=1, g=g, dg_dt=dg_dt, dg_dx=dg_dx, z_field=z_field, dz_dx=dz_dx,
        boundary=lambda x: x[..., 0] * (1.0 - x[..., 0]),
        boundary_grad=lambda x: np.stack([1.0 - 2.0 * x[..., 0]], axis=-1),
        horizon=horizon,
    )

    def project(t, x):
        # fold into [0,1] (triangle wave); exact in law for the flat wall,
        # local time 2·overshoot per the Tanaka decomposition
        p = np.remainder(x, 2.0)
        xc = np.where(p > 1.0, 2.0 - p, p)
        dl = math.exp(a * t) * np.abs(x - xc)[..., 0]
        return xc, dl

    def distance(t, x, y):
        return math.exp(a * t) * np.abs(x - y)[..., 0]

    def unit_tangent(t, x, y):
        return np.sign(y - x) * math.exp(-a * t)

    def transport_pair(t, x, y):
        return np.ones(x.shape[:-1] + (1, 1))

    def rz_form(t, x):
        return np.full(x.shape[:-1] + (1, 1), -a * math.exp(2 * a * t))

    def ii_form(t, x):
        return np.zeros(x.shape[:-1] + (1, 1))

    def boundary_normal(t, x):
        return np.sign(0.5 - x) * math.exp(-a * t)

    return ModelInstance(
        key="interval-exp", flow=flow, params={"a": a, "z0": z0},
        convex=True, x0=np.array([0.5]),
        k_bound=lambda t: -a,
        sigma_bound=lambda t: 0.0,
        k1_bound=lambda t: 0.0,                  # Ric^Z = 0 in 1-D with constant drift
        k2_bound=lambda t: 2.0 * a,
        rz_form=rz_form, ii_form=ii_form,
        distance=distance, unit_tangent=unit_tangent,
        transport_pair=transport_pair,
        project=project, boundary_normal=boundary_normal,
        in_chart=lambda x: np.ones(x.shape[:-1], dtype=bool),
        distance_drift_bound=lambda t, rho: a * rho,
        conformal_lambda=lambda t, x: np.full(x.shape[:-1], math.exp(a * t)),
        wall_distance=lambda t, x: math.exp(a * t) * np.minimum(
            x[..., 0], 1.0 - x[..., 0]),
    )


# ---------------------------------------------------------------------------
# scaled-disk
# ---------------------------------------------------------------------------


def scaled_disk(c0: float = 1.0, c1: float = 0.25, horizon: float = 2.0) -> ModelInstance:
    """Unit disk with g_t = c(t)² δ, c(t) = c0 + c1 t."""

    def c(t):
        return c0 + c1 * t

    def g(t, x):
        return c(t) ** 2 * np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()

    def dg_dt(t, x):
        return 2 * c(t) * c1 * np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()

    def dg_dx(t, x):
        return np.zeros(x.shape[:-1] + (2, 2, 2))

    def z_field(t, x):
        return np.zeros(x.shape[:-1] + (2,))

    def dz_dx(t, x):
        return np.zeros(x.shape[:-1] + (2, 2))

    flow = MetricFlow(
        dim=2, g=g, dg_dt=dg_dt, dg_dx=dg_dx, z_field=z_field, dz_dx=dz_dx,
        boundary=lambda x: 1.0 - np.sum(x * x, axis=-1),
        boundary_grad=lambda x: -2.0 * x,
        horizon=horizon,
    )

    def project(t, x):
        r = np.linalg.norm(x, axis=-1)
        out = r > 1.0
        rf = np.where(out, np.maximum(2.0 - r, 1e-12), r)   # radial fold
        xn = np.where(out[..., None],
                      x * (rf / np.maximum(r, 1e-300))[..., None], x)
        dl = np.where(out, c(t) * 2.0 * (r - 1.0), 0.0)
        return xn, dl

    def distance(t, x, y):
        return c(t) * np.linalg.norm(x - y, axis=-1)

    def unit_tangent(t, x, y):
        diff = y - x
        nn = np.linalg.norm(diff, axis=-1, keepdims=True)
        return diff / np.maximum(nn, 1e-300) / c(t)

    def transport_pair(t, x, y):
        return np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()

    def rz_form(t, x):
        return -c(t) * c1 * np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()

    def ii_form(t, x):
        return c(t) * np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()

    def boundary_normal(t, x):
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        return -x / np.maximum(r, 1e-300) / c(t)

    return ModelInstance(
        key="scaled-disk", flow=flow, params={"c0": c0, "c1": c1},
        convex=True, x0=np.array([0.0, 0.0]),
        k_bound=lambda t: -c1 / c(t),
        sigma_bound=lambda t: 1.0 / c(t),
        k1_bound=lambda t: 0.0,
        k2_bound=lambda t: 2.0 * c1 / c(t),
        rz_form=rz_form, ii_form=ii_form,
        distance=distance, unit_tangent=unit_tangent,
        transport_pair=transport_pair,
        project=project, boundary_normal=boundary_normal,
        in_chart=lambda x: np.ones(x.shape[:-1], dtype=bool),
        distance_drift_bound=lambda t, rho: (c1 / c(t)) * rho,
        conformal_lambda=lambda t, x: np.full(x.shape[:-1], c(t)),
        wall_distance=lambda t, x: c(t) * (1.0 - np.linalg.norm(x, axis=-1)),
    )


# ---------------------------------------------------------------------------
# ricciflow-capband
# ---------------------------------------------------------------------------


def _embed(x):
    th, ph = x[..., 0], x[..., 1]
    st = np.sin(th)
    return np.stack([st * np.cos(ph), st * np.sin(ph), np.cos(th)], axis=-1)


def _basis_theta(x):
    th, ph = x[..., 0], x[..., 1]
    ct = np.cos(th)
    return np.stack([ct * np.cos(ph), ct * np.sin(ph), -np.sin(th)], axis=-1)


def _basis_phi(x):
    th, ph = x[..., 0], x[..., 1]
    st = np.sin(th)
    return np.stack([-st * np.sin(ph), st * np.cos(ph), np.zeros_like(th)], axis=-1)


def _to_chart(x, w):
    """Ambient tangent w at the sphere point of chart coords x → chart components."""
    eth = _basis_theta(x)
    eph = _basis_phi(x)
    st2 = np.sin(x[..., 0]) ** 2
    vth = np.einsum("...i,...i->...", w, eth)
    vph = np.einsum("...i,...i->...", w, eph) / st2
    return np.stack([vth, vph], axis=-1)


def ricciflow_capband(theta_min: float = 0.25,
                      theta_max: float = math.pi - 0.25,
                      horizon: float = 0.4) -> ModelInstance:
    """Polar band on the 2-sphere under the shrinking flow g_t = (1-2t) g_{S²}."""

    def scale(t):
        return 1.0 - 2.0 * t

    def g(t, x):
        th = x[..., 0]
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = scale(t)
        out[..., 1, 1] = scale(t) * np.sin(th) ** 2
        return out

    def dg_dt(t, x):
        th = x[..., 0]
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = -2.0
        out[..., 1, 1] = -2.0 * np.sin(th) ** 2
        return out

    def dg_dx(t, x):
        th = x[..., 0]
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 1, 1, 0] = scale(t) * 2.0 * np.sin(th) * np.cos(th)
        return out

    def z_field(t, x):
        return np.zeros(x.shape[:-1] + (2,))

    def dz_dx(t, x):
        return np.zeros(x.shape[:-1] + (2, 2))

    flow = MetricFlow(
        dim=2, g=g, dg_dt=dg_dt, dg_dx=dg_dx, z_field=z_field, dz_dx=dz_dx,
        boundary=None, boundary_grad=None, horizon=horizon,
    )

    def distance(t, x, y):
        p, q = _embed(x), _embed(y)
        cosang = np.clip(np.einsum("...i,...i->...", p, q), -1.0, 1.0)
        return math.sqrt(scale(t)) * np.arccos(cosang)

    def unit_tangent(t, x, y):
        p, q = _embed(x), _embed(y)
        w = q - np.einsum("...i,...i->...", p, q)[..., None] * p
        nn = np.linalg.norm(w, axis=-1, keepdims=True)
        w = np.where(nn > 1e-14, w / np.maximum(nn, 1e-300), w)
        return _to_chart(x, w) / math.sqrt(scale(t))

    def transport_pair(t, x, y):
        """Great-circle parallel transport (a rotation of the ambient space)."""
        p, q = _embed(x), _embed(y)
        axis = np.cross(p, q)
        sn = np.linalg.norm(axis, axis=-1)
        cs = np.clip(np.einsum("...i,...i->...", p, q), -1.0, 1.0)
        small = sn < 1e-13
        k = axis / np.maximum(sn, 1e-300)[..., None]
        # Rodrigues rotation taking p to q, applied to the chart basis at x
        def rotate(w):
            kw = np.cross(k, w)
            kdw = np.einsum("...i,...i->...", k, w)
            return (w * cs[..., None] + kw * sn[..., None]
                    + k * (kdw * (1.0 - cs))[..., None])
        cols = []
        for basis in (_basis_theta(x), _basis_phi(x)):
            w = rotate(basis)
            cols.append(_to_chart(y, w))
        tp = np.stack(cols, axis=-1)   # [..., component, which basis vector]
        eye = np.broadcast_to(np.eye(2), tp.shape)
        return np.where(small[..., None, None], eye, tp)

    def rz_form(t, x):
        # Ric = g_{S²} (scale-invariant) and −½∂_t g = g_{S²}
        th = x[..., 0]
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 2.0
        out[..., 1, 1] = 2.0 * np.sin(th) ** 2
        return out

    def drift_bound(t, rho):
        s = scale(t)
        kappa = 1.0 / s
        sq = math.sqrt(kappa)
        return -rho / s - 2.0 * sq * np.tan(sq * rho / 2.0)

    return ModelInstance(
        key="ricciflow-capband", flow=flow,
        params={"theta_min": theta_min, "theta_max": theta_max},
        convex=True, x0=np.array([math.pi / 2, 0.0]),
        k_bound=lambda t: 2.0 / scale(t),
        sigma_bound=lambda t: 0.0,
        k1_bound=lambda t: -1.0 / scale(t),
        k2_bound=lambda t: -2.0 / scale(t),
        rz_form=rz_form, ii_form=None,
        distance=distance, unit_tangent=unit_tangent,
        transport_pair=transport_pair,
        project=None, boundary_normal=None,
        in_chart=lambda x: (x[..., 0] >= theta_min) & (x[..., 0] <= theta_max),
        distance_drift_bound=drift_bound,
    )


# ---------------------------------------------------------------------------
# halfplane-bump
# ---------------------------------------------------------------------------


def halfplane_bump(amp: float = 0.3, horizon: float = 10.0,
                   collar: float = 3.0) -> ModelInstance:
    """{x₂ ≥ 0} with g = e^{2w} δ, w = amp·x₂·exp(−x₁²/2 − x₂).

    The wall is concave: II(unit tangential) = −amp·e^{−x₁²/2} ≥ −amp,
    worst at the origin, flattening out along the wall and into the bulk.
    """

    def w_func(x):
        x1, x2 = x[..., 0], x[..., 1]
        return amp * x2 * np.exp(-0.5 * x1**2 - x2)

    def dw(x):
        x1, x2 = x[..., 0], x[..., 1]
        e = np.exp(-0.5 * x1**2 - x2)
        return np.stack([-x1 * amp * x2 * e, amp * (1.0 - x2) * e], axis=-1)

    def lap0_w(x):
        x1, x2 = x[..., 0], x[..., 1]
        e = np.exp(-0.5 * x1**2 - x2)
        return amp * e * (x2 * (x1**2 - 1.0) + (x2 - 2.0))

    def g(t, x):
        f = np.exp(2.0 * w_func(x))
        return f[..., None, None] * np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2))

    def dg_dt(t, x):
        return np.zeros(x.shape[:-1] + (2, 2))

    def dg_dx(t, x):
        gx = g(t, x)
        grad = dw(x)
        return 2.0 * np.einsum("...ij,...k->...ijk", gx, grad)

    def z_field(t, x):
        return np.zeros(x.shape[:-1] + (2,))

    def dz_dx(t, x):
        return np.zeros(x.shape[:-1] + (2, 2))

    flow = MetricFlow(
        dim=2, g=g, dg_dt=dg_dt, dg_dx=dg_dx, z_field=z_field, dz_dx=dz_dx,
        boundary=lambda x: x[..., 1],
        boundary_grad=lambda x: np.broadcast_to(
            np.array([0.0, 1.0]), x.shape).copy(),
        horizon=horizon,
    )

    def project(t, x):
        below = x[..., 1] < 0.0
        xn = x.copy()
        xn[..., 1] = np.abs(x[..., 1])
        wall = xn.copy()
        wall[..., 1] = 0.0
        dl = np.where(below, 2.0 * np.abs(x[..., 1]) * np.exp(w_func(wall)), 0.0)
        return xn, dl

    def lam(t, x):
        return np.exp(w_func(x))

    def distance(t, x, y):
        mid = 0.5 * (x + y)
        return lam(t, mid) * np.linalg.norm(x - y, axis=-1)

    def unit_tangent(t, x, y):
        diff = y - x
        nn = np.linalg.norm(diff, axis=-1, keepdims=True)
        return diff / np.maximum(nn, 1e-300) / lam(t, x)[..., None]

    def transport_pair(t, x, y):
        ratio = lam(t, x) / lam(t, y)
        return ratio[..., None, None] * np.broadcast_to(
            np.eye(2), x.shape[:-1] + (2, 2))

    def rz_form(t, x):
        # 2-D conformal metric: Ric = −(Δ₀ w) δ; Z = 0; ∂_t g = 0
        return -lap0_w(x)[..., None, None] * np.broadcast_to(
            np.eye(2), x.shape[:-1] + (2, 2))

    def ii_form(t, x):
        grad = dw(x)
        return (-grad[..., 1] * np.exp(w_func(x)))[..., None, None] * \
            np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2))

    def boundary_normal(t, x):
        n = np.zeros(x.shape)
        n[..., 1] = np.exp(-w_func(x))
        return n

    # numeric curvature bounds over the collar where paths live
    xs1 = np.linspace(-collar, collar, 241)
    xs2 = np.linspace(0.0, collar, 121)
    gridpts = np.stack(np.meshgrid(xs1, xs2, indexing="ij"), axis=-1).reshape(-1, 2)
    ricw = lap0_w(gridpts) * np.exp(-2.0 * w_func(gridpts))  # −Ric(unit) values
    k1_val = float(np.max(ricw))        # Ric^Z ≥ −k1
    k_val = float(np.min(-ricw))        # R^Z ≥ k  (∂_t g = 0, Z = 0)

    return ModelInstance(
        key="halfplane-bump", flow=flow, params={"amp": amp, "collar": collar},
        convex=False, x0=np.array([0.0, 0.5]),
        k_bound=lambda t: k_val,
        sigma_bound=lambda t: -amp,
        k1_bound=lambda t: k1_val,
        k2_bound=lambda t: 0.0,
        rz_form=rz_form, ii_form=ii_form,
        distance=distance, unit_tangent=unit_tangent,
        transport_pair=transport_pair,
        project=project, boundary_normal=boundary_normal,
        in_chart=lambda x: np.ones(x.shape[:-1], dtype=bool),
        distance_drift_bound=None,
        conformal_lambda=lam,
        wall_distance=lambda t, x: x[..., 1] * lam(
            t, np.stack([x[..., 0], 0.5 * x[..., 1]], axis=-1)),
    )


# ---------------------------------------------------------------------------


CATALOG = {
    "interval-exp": interval_exp,
    "scaled-disk": scaled_disk,
    "ricciflow-capband": ricciflow_capband,
    "halfplane-bump": halfplane_bump,
}


def make_instance(key: str, **params) -> ModelInstance:
    if key not in CATALOG:
        raise ConfigError(f"unknown instance key {key!r}; have {sorted(CATALOG)}")
    try:
        return CATALOG[key](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {key!r}: {exc}")
