"""Closed-form geometry checks on the catalog flows."""

import math

import numpy as np
import pytest

from riemflow import catalog, geometry


# ---------------------------------------------------------------------------
# metric plumbing
# ---------------------------------------------------------------------------


def test_orthonormal_frame_is_orthonormal():
    inst = catalog.make_instance("halfplane-bump")
    x = np.array([[0.3, 0.7], [-1.1, 0.2], [0.0, 1.5]])
    u = geometry.orthonormal_frame(inst.flow, 0.2, x)
    g = geometry.metric(inst.flow, 0.2, x)
    a = np.einsum("...ki,...kl,...lj->...ij", u, g, u)
    assert np.allclose(a, np.eye(2), atol=1e-12)


def test_inner_and_norm_consistent():
    inst = catalog.make_instance("scaled-disk", c0=1.0, c1=0.25)
    x = np.array([0.3, -0.2])
    v = np.array([1.0, 2.0])
    t = 0.4
    c = 1.0 + 0.25 * t
    assert geometry.inner(inst.flow, t, x, v, v) == pytest.approx(c * c * 5.0)
    assert geometry.g_norm(inst.flow, t, x, v) == pytest.approx(c * math.sqrt(5.0))


# ---------------------------------------------------------------------------
# Christoffel symbols and curvature
# ---------------------------------------------------------------------------


def test_christoffel_sphere_band_closed_form():
    inst = catalog.make_instance("ricciflow-capband")
    th = 1.1
    x = np.array([[th, 0.3]])
    gam = geometry.christoffel(inst.flow, 0.05, x)[0]   # (k, i, j)
    # scale-invariant symbols of the round metric
    assert gam[0, 1, 1] == pytest.approx(-math.sin(th) * math.cos(th), abs=1e-10)
    assert gam[1, 0, 1] == pytest.approx(math.cos(th) / math.sin(th), abs=1e-10)
    assert gam[0, 0, 0] == pytest.approx(0.0, abs=1e-10)


def test_christoffel_vanishes_for_spatially_constant_metric():
    inst = catalog.make_instance("scaled-disk")
    x = np.array([[0.2, 0.4]])
    gam = geometry.christoffel(inst.flow, 0.3, x)
    assert np.allclose(gam, 0.0)


def test_ricci_round_sphere():
    inst = catalog.make_instance("ricciflow-capband")
    th = 0.9
    x = np.array([th, 0.0])
    ric = geometry.ricci(inst.flow, 0.1, x)
    # Ric(g) = g_{S^2} for every scale of the round metric
    expect = np.diag([1.0, math.sin(th) ** 2])
    assert np.allclose(ric, expect, atol=5e-4)


def test_rz_matrix_matches_catalog_form():
    for key in ("interval-exp", "scaled-disk", "ricciflow-capband"):
        inst = catalog.make_instance(key)
        x = inst.x0
        t = 0.1
        rz_geom = geometry.r_z_matrix(inst.flow, t, x)
        rz_cat = np.asarray(inst.rz_form(t, x[None]), dtype=float)[0]
        assert np.allclose(rz_geom, rz_cat, atol=5e-3), key


def test_sectional_curvature_sphere():
    inst = catalog.make_instance("ricciflow-capband")
    x = np.array([math.pi / 2, 0.0])
    t = 0.1
    kappa = geometry.sectional_curvature(
        inst.flow, t, x, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert kappa == pytest.approx(1.0 / (1.0 - 2.0 * t), rel=2e-3)


# ---------------------------------------------------------------------------
# geodesics, transport, distance
# ---------------------------------------------------------------------------


def test_geodesic_distance_disk():
    inst = catalog.make_instance("scaled-disk", c0=1.0, c1=0.25)
    x, y = np.array([0.3, 0.1]), np.array([-0.4, -0.2])
    t = 0.8
    d, _ = geometry.geodesic_distance(inst.flow, t, x, y)
    assert d == pytest.approx(float(inst.distance(t, x[None], y[None])[0]),
                              rel=1e-6)


def test_geodesic_distance_sphere_band():
    inst = catalog.make_instance("ricciflow-capband")
    x = np.array([math.pi / 2, 0.0])
    y = np.array([math.pi / 2 - 0.4, 0.7])
    d, _ = geometry.geodesic_distance(inst.flow, 0.05, x, y)
    assert d == pytest.approx(float(inst.distance(0.05, x[None], y[None])[0]),
                              rel=1e-4)


def test_parallel_transport_preserves_norm():
    inst = catalog.make_instance("ricciflow-capband")
    t = 0.05
    x = np.array([math.pi / 2, 0.0])
    y = np.array([math.pi / 2 - 0.3, 0.5])
    xs, _ = geometry.geodesic_shoot(inst.flow, t, x, y)
    v = np.array([0.7, -0.4])
    w = geometry.parallel_transport(inst.flow, t, xs, v)
    n0 = geometry.g_norm(inst.flow, t, x, v)
    n1 = geometry.g_norm(inst.flow, t, y, w)
    assert n1 == pytest.approx(n0, rel=1e-3)


def test_transport_pair_is_isometry():
    for key in ("scaled-disk", "ricciflow-capband", "halfplane-bump"):
        inst = catalog.make_instance(key)
        t = 0.05
        x = inst.x0[None]
        if key == "ricciflow-capband":
            y = np.array([[math.pi / 2 - 0.3, 0.4]])
        else:
            y = x + np.array([[0.2, 0.15]])
        tp = inst.transport_pair(t, x, y)
        gx = np.asarray(inst.flow.g(t, x), dtype=float)
        gy = np.asarray(inst.flow.g(t, y), dtype=float)
        pulled = np.einsum("...ki,...kl,...lj->...ij", tp, gy, tp)
        assert np.allclose(pulled, gx, atol=1e-10), key


def test_mirror_pair_reflects_tangent():
    # M maps the unit tangent at x to MINUS the (outgoing) tangent at y
    # and is still a g-isometry
    inst = catalog.make_instance("scaled-disk")
    t = 0.2
    x, y = np.array([[0.1, 0.0]]), np.array([[0.5, 0.3]])
    m = inst.mirror_pair(t, x, y)
    gx = np.asarray(inst.flow.g(t, x), dtype=float)
    gy = np.asarray(inst.flow.g(t, y), dtype=float)
    pulled = np.einsum("...ki,...kl,...lj->...ij", m, gy, m)
    assert np.allclose(pulled, gx, atol=1e-10)
    tx = inst.unit_tangent(t, x, y)
    ty = -inst.unit_tangent(t, y, x)
    assert np.allclose(np.einsum("...ij,...j->...i", m, tx), -ty, atol=1e-10)


# ---------------------------------------------------------------------------
# boundary data
# ---------------------------------------------------------------------------


def test_boundary_normal_is_unit_inward():
    inst = catalog.make_instance("scaled-disk", c0=1.0, c1=0.25)
    t = 0.6
    x = np.array([[0.0, 1.0]])
    n = inst.boundary_normal(t, x)
    assert geometry.g_norm(inst.flow, t, x, n)[0] == pytest.approx(1.0)
    assert n[0, 1] < 0.0          # points into the disk


def test_second_fundamental_form_signs():
    disk = catalog.make_instance("scaled-disk")
    hp = catalog.make_instance("halfplane-bump", amp=0.3)
    # disk wall is convex, bump wall concave at the origin
    assert float(disk.ii_form(0.0, np.array([[1.0, 0.0]]))[0, 1, 1]) > 0.0
    assert float(hp.ii_form(0.0, np.array([[0.0, 0.0]]))[0, 0, 0]) < 0.0


# ---------------------------------------------------------------------------
# conformal change
# ---------------------------------------------------------------------------


def test_conformal_flow_scales_metric():
    base = catalog.make_instance("scaled-disk").flow

    def phi(t, x):
        return 1.0 + 0.1 * x[..., 0] ** 2

    def dphi(t, x):
        out = np.zeros(x.shape)
        out[..., 0] = 0.2 * x[..., 0]
        return out

    cf = geometry.ConformalFactor(phi=phi, dphi_dx=dphi)
    tilde = geometry.conformal_flow(base, cf)
    x = np.array([[0.4, -0.3]])
    t = 0.2
    g0 = np.asarray(base.g(t, x), dtype=float)
    g1 = np.asarray(tilde.g(t, x), dtype=float)
    assert np.allclose(g1, g0 / phi(t, x)[..., None, None] ** 2)


def test_conformal_flow_dg_dx_consistent():
    base = catalog.make_instance("scaled-disk").flow

    def phi(t, x):
        return 1.0 + 0.1 * x[..., 0] ** 2 + 0.05 * x[..., 1]

    def dphi(t, x):
        out = np.zeros(x.shape)
        out[..., 0] = 0.2 * x[..., 0]
        out[..., 1] = 0.05
        return out

    tilde = geometry.conformal_flow(base, geometry.ConformalFactor(
        phi=phi, dphi_dx=dphi))
    x = np.array([[0.3, 0.2]])
    t = 0.1
    h = 1e-6
    dg = np.asarray(tilde.dg_dx(t, x), dtype=float)
    for c in range(2):
        e = np.zeros(2)
        e[c] = h
        fd = (np.asarray(tilde.g(t, x + e)) - np.asarray(tilde.g(t, x - e))) / (2 * h)
        assert np.allclose(dg[..., c], fd, atol=1e-6)


def test_apply_generator_flat_laplacian():
    inst = catalog.make_instance("scaled-disk", c0=1.0, c1=0.0)
    f = lambda y: float(y[0] ** 2 + y[1] ** 2)
    val = geometry.apply_generator(inst.flow, 0.0, f, np.array([0.2, 0.1]))
    assert val == pytest.approx(4.0, rel=1e-4)
