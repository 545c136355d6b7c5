"""Inequality battery and small-time identification machinery."""

import math

import numpy as np
import pytest

from riemflow import catalog, verify
from riemflow.errors import ExtrapolationUnstable, OracleFailure
from riemflow.verify import (CheckReport, calibrated_function,
                             curvature_identification_suite,
                             gradient_entropy_suite, hypercontractivity_suite,
                             ii_smalltime, kolmogorov_check,
                             local_time_asymptotic_check, rz_smalltime,
                             semigroup_inequality_suite, write_reports)

F_SMOOTH = lambda xs: 1.0 + 0.5 * np.cos(np.pi * xs[..., 0])


# ---------------------------------------------------------------------------
# report plumbing
# ---------------------------------------------------------------------------


def test_report_pass_rules():
    assert CheckReport("c", "i", lhs=1.0, rhs=2.0, tol=0.0).passed
    assert not CheckReport("c", "i", lhs=2.1, rhs=2.0, tol=0.05).passed
    assert CheckReport("c", "i", lhs=1.0, rhs=1.1, tol=0.2,
                       kind="identity").passed
    assert not CheckReport("c", "i", lhs=1.0, rhs=1.5, tol=0.2,
                           kind="identity").passed


def test_write_reports_deterministic(tmp_path):
    reps = [CheckReport("alpha", "interval-exp", 0.1, 0.2, 1e-3,
                        params={"b": 2, "a": 1}),
            CheckReport("beta", "scaled-disk", 1.0, 1.0, 0.0,
                        kind="identity")]
    p1, p2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    write_reports(p1, reps)
    write_reports(p2, reps)
    assert p1.read_bytes() == p2.read_bytes()
    text = p1.read_text()
    assert text.startswith("# riemflow check report v1\n")
    assert "a=1;b=2" in text               # params sorted by key


# ---------------------------------------------------------------------------
# PDE consistency
# ---------------------------------------------------------------------------


def test_kolmogorov_backward_and_trace():
    inst = catalog.make_instance("interval-exp", a=0.5)
    f = lambda xs: xs[..., 0] ** 2 * (1.0 - xs[..., 0]) ** 2
    rep1, rep2 = kolmogorov_check(inst, f, 0.0, 0.3)
    assert rep1.passed, rep1.lhs
    assert rep2.passed, rep2.lhs


def test_local_time_constant():
    inst = catalog.make_instance("interval-exp", a=0.0)
    rep = local_time_asymptotic_check(inst, np.array([0.0]), n_paths=20000,
                                      seed=0)
    assert rep.passed
    # the fitted constant itself is within 5% of 2/sqrt(pi)
    assert rep.params["c_fit"] == pytest.approx(2.0 / math.sqrt(math.pi),
                                                rel=0.05)


# ---------------------------------------------------------------------------
# inequality suites on the 1-D oracle
# ---------------------------------------------------------------------------


def test_gradient_entropy_suite_all_pass():
    inst = catalog.make_instance("interval-exp", a=0.5)
    reps = gradient_entropy_suite(inst, F_SMOOTH, 0.0, 0.4)
    assert len(reps) == 6
    for rep in reps:
        assert rep.passed, rep.check


def test_semigroup_inequality_suite_all_pass():
    inst = catalog.make_instance("interval-exp", a=0.5)
    reps = semigroup_inequality_suite(inst, F_SMOOTH, 0.0, 0.4,
                                      np.array([0.35]), np.array([0.65]))
    assert len(reps) == 7
    for rep in reps:
        assert rep.passed, rep.check


@pytest.mark.parametrize("q1,u_frac", [(2.0, 0.5), (0.5, 0.75)])
def test_hypercontractivity(q1, u_frac):
    inst = catalog.make_instance("interval-exp", a=0.0)
    t = 0.4
    rep = hypercontractivity_suite(inst, F_SMOOTH, 0.0, u_frac * t, t, q1=q1)
    assert rep.passed, (q1, rep.lhs)


def test_suite_rejects_2d_instances():
    disk = catalog.make_instance("scaled-disk")
    with pytest.raises(OracleFailure):
        gradient_entropy_suite(disk, lambda xs: xs[..., 0], 0.0, 0.2)


# ---------------------------------------------------------------------------
# small-time identification
# ---------------------------------------------------------------------------


def test_calibrated_function_gradient():
    inst = catalog.make_instance("ricciflow-capband")
    x = np.array([math.pi / 2, 0.0])
    v = np.array([0.3, -0.2])
    f, df = calibrated_function(inst, 0.0, x, v)
    assert f(x[None])[0] == pytest.approx(0.0, abs=1e-14)
    g = np.asarray(inst.flow.g(0.0, x[None]), dtype=float)[0]
    assert np.allclose(df(x[None])[0], g @ v)


def test_rz_smalltime_interval():
    inst = catalog.make_instance("interval-exp", a=0.5)
    est, rungs, errs = rz_smalltime(inst, np.array([0.5]), np.array([1.0]),
                                    horizons=(0.0025, 0.00125, 0.000625))
    assert est == pytest.approx(-0.5, abs=0.05)


def test_rz_smalltime_needs_wall_compatible_center():
    inst = catalog.make_instance("interval-exp", a=0.5)
    with pytest.raises(OracleFailure):
        rz_smalltime(inst, np.array([0.3]), np.array([1.0]))


def test_ii_smalltime_flat_wall():
    inst = catalog.make_instance("halfplane-bump", amp=0.0)
    f = lambda ys: np.sin(np.asarray(ys)[..., 0])

    def df(ys):
        y1 = np.asarray(ys)[..., 0]
        return np.stack([np.cos(y1), np.zeros_like(y1)], axis=-1)

    est, _, _ = ii_smalltime(inst, np.array([0.0, 0.0]),
                             np.array([1.0, 0.0]), probe=(f, df),
                             n_paths=20000, seed=4)
    assert abs(est) < 0.05


def test_extrapolation_guard():
    with pytest.raises(ExtrapolationUnstable):
        verify._check_monotone([1.0, 2.0, 1.0], [1e-6, 1e-6, 1e-6], "probe")


def test_curvature_suite_reports_shape():
    reps = curvature_identification_suite(seed=0, n_paths=4000)
    names = [r.check for r in reps]
    assert names == ["rz-smalltime-interval", "rz-smalltime-sphere",
                     "ii-smalltime-halfplane", "ii-smalltime-disk"]
    for rep in reps:
        assert rep.kind == "identity"
