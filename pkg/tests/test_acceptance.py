"""End-to-end acceptance battery.

One test per shipped guarantee; each prints a single PASS/FAIL line so the
suite doubles as a release checklist.  Budgets are sized so every test stays
well under five minutes on a laptop.
"""

import math

import numpy as np
import pytest

from riemflow import catalog, cli, coupling, harnack, verify
from riemflow.cli import RunConfig
from riemflow.derivative import (assert_certificate, bismut_gradient,
                                 q_path_functional)
from riemflow.diffusion import mc_semigroup
from riemflow.harnack import (entropy_bound_check, girsanov_coupled_run,
                              k_phi_terms, log_harnack_verify,
                              moment_bound_check, nonconvex_harnack,
                              normalization_check, p_harnack_verify,
                              phi_profile, probe_points, xi_schedule)
from riemflow.oracle import (grid_gradient_value, grid_value, make_grid,
                             neumann_heat_solve)
from riemflow.verify import local_time_asymptotic_check


def _verdict(num, title, ok):
    print(f"[criterion {num}] {title}: {'PASS' if ok else 'FAIL'}")
    assert ok, f"criterion {num} ({title}) failed"


# ---------------------------------------------------------------------------
# 1. Monte Carlo sampler agrees with the PDE oracle
# ---------------------------------------------------------------------------


def test_criterion_1_oracle_agreement():
    cfg = RunConfig(seed=0, n_paths=20000, n_steps=600)
    reports = cli.cmd_oracle_compare(cfg)
    assert len(reports) == 8          # 2 slopes x (3 functions + conservative)
    _verdict(1, "oracle-agreement", all(r.passed for r in reports))


# ---------------------------------------------------------------------------
# 2. boundary local-time constant 2/sqrt(pi)
# ---------------------------------------------------------------------------


def test_criterion_2_local_time_constant():
    inst = catalog.make_instance("interval-exp", a=0.0)
    rep = local_time_asymptotic_check(inst, np.array([0.0]), n_paths=20000,
                                      seed=0)
    c_fit = rep.params["c_fit"]
    ok = rep.passed and abs(c_fit - 2.0 / math.sqrt(math.pi)) \
        <= 0.05 * (2.0 / math.sqrt(math.pi))
    _verdict(2, "local-time-constant", ok)


# ---------------------------------------------------------------------------
# 3. derivative formulas vs oracle, Q certificate over 1e5 paths
# ---------------------------------------------------------------------------


def test_criterion_3_derivative_formula():
    cfg = RunConfig(seed=0, n_paths=20000, n_steps=500)
    reports = cli.cmd_verify_gradient(cfg)
    ok = all(r.passed for r in reports)

    # hard certificate assertion over >= 1e5 paths on both instance types
    for key, x in (("interval-exp", np.array([0.5])),
                   ("scaled-disk", np.array([0.2, -0.1]))):
        inst = catalog.make_instance(key)
        idx = np.arange(100000, dtype=np.uint64)
        _, qm, _, good = q_path_functional(inst, x, 0.0, 0.1, 200, 0, idx)
        assert_certificate(qm)        # raises RuntimeFailure on violation
        assert int(np.sum(good)) >= 99900
    _verdict(3, "derivative-formula", ok)


# ---------------------------------------------------------------------------
# 4. gradient estimate |grad P f| <= e^{-int K} P|grad f| on 20 probes
# ---------------------------------------------------------------------------


def test_criterion_4_gradient_estimate():
    violations = 0
    n_probes = 0

    # interval probes: both sides oracle-exact, so no stochastic slack
    a = 0.5
    iv = catalog.make_instance("interval-exp", a=a)
    fns = [
        (lambda xs: 1.0 + 0.5 * np.cos(np.pi * xs[..., 0]),
         lambda x: -0.5 * np.pi * np.sin(np.pi * x)),
        (lambda xs: xs[..., 0] ** 2 * (1.0 - xs[..., 0]) ** 2,
         lambda x: 2.0 * x * (1.0 - x) * (1.0 - 2.0 * x)),
        (lambda xs: 1.0 / (1.0 + xs[..., 0]),
         lambda x: -1.0 / (1.0 + x) ** 2),
    ]
    for f, fp in fns:
        for (s, t) in ((0.0, 0.2), (0.0, 0.4)):
            grid = make_grid(s, t)
            sol = neumann_heat_solve(iv, f, s, t, grid)
            # |grad f| in g_t at the endpoint: e^{-at}|f'|
            h = lambda xs: math.exp(-a * t) * np.abs(fp(xs[..., 0]))
            solh = neumann_heat_solve(iv, h, s, t, grid)
            for xq in (0.3, 0.6):
                lhs = abs(grid_gradient_value(sol, grid, iv, s, xq))
                rhs = math.exp(a * (t - s)) * float(grid_value(solh, grid,
                                                               xq))
                n_probes += 1
                if lhs > rhs + 1e-4:
                    violations += 1

    # shrinking-sphere probes: Monte Carlo on both sides
    sp = catalog.make_instance("ricciflow-capband")
    scale = lambda t: 1.0 - 2.0 * t

    f1 = lambda ys: np.cos(ys[..., 0])
    h1 = lambda t: (lambda ys: np.abs(np.sin(ys[..., 0]))
                    / math.sqrt(scale(t)))
    f2 = lambda ys: np.sin(ys[..., 0]) * np.cos(ys[..., 1])
    h2 = lambda t: (lambda ys: np.sqrt(
        np.cos(ys[..., 0]) ** 2 * np.cos(ys[..., 1]) ** 2
        + np.sin(ys[..., 1]) ** 2) / math.sqrt(scale(t)))

    seed = 100
    for f, hmk in ((f1, h1), (f2, h2)):
        for (s, t) in ((0.0, 0.03), (0.01, 0.05)):
            for x in (np.array([math.pi / 2, 0.0]), np.array([1.2, 0.4])):
                vec, se = bismut_gradient(sp, f, s, t, x, 20000, 100, seed)
                lhs = float(np.linalg.norm(vec))
                ph, se_h = mc_semigroup(sp, hmk(t), s, t, x, 20000, 100,
                                        seed + 1)
                damp = scale(t) / scale(s)         # e^{-int K}
                slack = 3.0 * (float(np.linalg.norm(se)) + damp * se_h)
                n_probes += 1
                if lhs > damp * ph + slack:
                    violations += 1
                seed += 2

    assert n_probes >= 20
    _verdict(4, "gradient-estimate", violations == 0)


# ---------------------------------------------------------------------------
# 5. coupling bounds: constancy, monitor refinement, Wasserstein contraction
# ---------------------------------------------------------------------------


def test_criterion_5_coupling_bounds():
    cfg = RunConfig(seed=0, n_paths=20000, n_steps=400)
    reports = cli.cmd_verify_coupling(cfg)
    _verdict(5, "coupling-bounds", all(r.passed for r in reports))


# ---------------------------------------------------------------------------
# 6. xi schedule, Girsanov ledger, Harnack inequalities
# ---------------------------------------------------------------------------


def test_criterion_6_harnack_machinery():
    ok = True
    inst = catalog.make_instance("interval-exp", a=0.5)
    x, y = np.array([0.35]), np.array([0.65])
    T = 0.3
    rho0 = float(inst.distance(0.0, x[None], y[None])[0])

    for theta in (0.5, 1.0, 1.5):
        sched = xi_schedule(theta, inst.k_bound, T)
        ts = np.linspace(1e-4, T - 1e-4, 301)
        ok &= float(np.max(np.abs(sched.ode_residual(ts)))) <= 1e-8

        n_paths = 20000 if theta == 1.0 else 10000
        run = girsanov_coupled_run(inst, x, y, theta, T, 600, 11, n_paths)
        mean_r, se_r = normalization_check(run)
        ok &= abs(mean_r - 1.0) <= 3.0 * se_r
        est, se, bound = entropy_bound_check(run, rho0, theta, inst.k_bound,
                                             T)
        ok &= est <= bound + 3.0 * se
        est2, se2, bound2, heavy = moment_bound_check(run, rho0, 2.0, theta,
                                                      inst.k_bound, T)
        ok &= (not heavy) and est2 <= bound2 + 3.0 * se2
        if theta == 1.0:
            fail_rate = 1.0 - float(np.mean(run.coalesced[run.ok]))
            ok &= fail_rate < 0.02

    f = lambda xs: 1.0 + np.cos(np.pi * xs[..., 0]) ** 2
    rep_log = log_harnack_verify(inst, f, x, y, 0.0, T, 2000, 600, 0)
    rep_p = p_harnack_verify(inst, f, 2.0, x, y, 0.0, T, 2000, 600, 0)
    ok &= rep_log.passed and rep_log.stderr_lhs == 0.0 and rep_p.passed

    disk = catalog.make_instance("scaled-disk")
    fd = lambda ys: 1.0 + np.cos(ys[..., 0]) ** 2
    rep_d = p_harnack_verify(disk, fd, 2.0, np.array([0.2, 0.0]),
                             np.array([-0.2, 0.1]), 0.0, T, 20000, 600, 1)
    ok &= rep_d.passed
    _verdict(6, "harnack-machinery", ok)


# ---------------------------------------------------------------------------
# 7. variable diffusion coefficient and non-convex boundary
# ---------------------------------------------------------------------------


def test_criterion_7_psi_and_nonconvex():
    # psi == 2 quadruples the clock of the static interval flow
    inst = catalog.make_instance("interval-exp", a=0.0)
    f = lambda xs: 1.0 + 0.5 * np.cos(np.pi * xs[..., 0])
    T = 0.05
    psi2 = lambda t, x: np.full(np.asarray(x).shape[:-1], 2.0)
    val, se = mc_semigroup(inst, f, 0.0, T, np.array([0.4]), 20000, 250, 4,
                           psi=psi2)
    grid = make_grid(0.0, 4.0 * T)
    sol = neumann_heat_solve(inst, f, 0.0, 4.0 * T, grid)
    ref = float(grid_value(sol, grid, 0.4))
    ok = abs(val - ref) <= 3.0 * se + 1e-3

    # conformal extension across the non-convex wall
    base = catalog.make_instance("halfplane-bump", amp=0.3)
    rep1, rep2, consts = nonconvex_harnack(
        base, 4.0, np.array([-0.5, 0.6]), np.array([0.5, 0.8]), 0.0, 0.3,
        20000, 600, 3)
    ok &= rep1.passed and rep2.passed and consts["membership_min"] >= -1e-6

    # re-extremize the conformal constants on a refined probe grid and a
    # denser time ladder; they must be grid-stable to 1%
    amp, r0, k = 0.3, 0.5, 1.0
    sigma = 1.25 * amp
    prof, norm_inf, _ = phi_profile(r0, sigma, k, 0.0, base.dim)
    phi_fn = lambda t, pts: prof(pts[..., -1])
    h = 1e-5

    def dphi_fn(t, pts):
        out = np.zeros(pts.shape)
        rs = np.maximum(pts[..., -1], h)
        out[..., -1] = (prof(rs + h) - prof(rs - h)) / (2.0 * h)
        return out

    def lap_phi_fn(t, pts):
        rs = np.maximum(pts[..., -1], h)
        d2 = (prof(rs + h) - 2.0 * prof(rs) + prof(rs - h)) / h ** 2
        return d2 / base.conformal_lambda(t, pts) ** 2

    fine = probe_points(base, n=121)
    terms = k_phi_terms(base, phi_fn, dphi_fn, lap_phi_fn, 0.0, 0.3,
                        pts=fine, n_t=11)
    ok &= abs(terms["k_phi"] - consts["k_phi"]) <= 0.01 * abs(consts["k_phi"])
    _, norm_fine, _ = phi_profile(r0, sigma, k, 0.0, base.dim, n_quad=8001)
    ok &= abs(norm_fine - consts["phi_norm"]) <= 0.01 * consts["phi_norm"]
    _verdict(7, "psi-and-nonconvex-harnack", ok)


# ---------------------------------------------------------------------------
# 8. small-time curvature identification
# ---------------------------------------------------------------------------


def test_criterion_8_curvature_identification():
    reports = verify.curvature_identification_suite(seed=0, n_paths=20000)
    assert [r.check for r in reports] == [
        "rz-smalltime-interval", "rz-smalltime-sphere",
        "ii-smalltime-halfplane", "ii-smalltime-disk"]
    _verdict(8, "curvature-identification", all(r.passed for r in reports))


# ---------------------------------------------------------------------------
# 9. full inequality suite, deterministic CSV at any worker count
# ---------------------------------------------------------------------------


def test_criterion_9_inequality_suite(tmp_path):
    cfgp = tmp_path / "suite.ini"
    cfgp.write_text("[run]\nseed = 0\nn_paths = 20000\n")
    out1, out2 = tmp_path / "s1.csv", tmp_path / "s2.csv"
    code1 = cli.main(["verify-suite", "--config", str(cfgp),
                      "--out", str(out1), "--workers", "1"])
    code2 = cli.main(["verify-suite", "--config", str(cfgp),
                      "--out", str(out2), "--workers", "3"])
    ok = code1 == 0 and code2 == 0 and out1.read_bytes() == out2.read_bytes()
    _verdict(9, "inequality-suite", ok)
