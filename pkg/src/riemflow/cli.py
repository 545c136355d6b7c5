"""Configuration-driven command line entry point.

Commands
--------
simulate          emit one reflected path as CSV
verify-gradient   derivative estimators vs oracle / each other
verify-coupling   coupled-pair monitors and Wasserstein contraction
verify-harnack    Harnack batteries incl. variable-coefficient / non-convex
verify-curvature  small-time curvature and boundary-form recovery
verify-suite      the full inequality battery from the verify module
oracle-compare    Monte Carlo semigroup vs the 1-D PDE oracle

Exit codes: 0 all PASS, 1 check failure, 2 bad configuration,
3 runtime failure.  Same config + seed gives byte-identical CSV output,
independent of the worker count.
"""

import argparse
import configparser
import inspect
import math
import os
import sys

import numpy as np

from . import catalog, coupling, derivative, harnack, oracle, verify
from .diffusion import mc_semigroup, simulate_path
from .errors import CheckFailure, ConfigError, RiemflowError, RuntimeFailure
from .rng import RngStream
from .verify import CheckReport, write_reports

COMMANDS = ("simulate", "verify-gradient", "verify-coupling",
            "verify-harnack", "verify-curvature", "verify-suite",
            "oracle-compare")

WORKERS_ENV = "RIEMFLOW_WORKERS"

# keys the [run] section may carry; anything else is rejected by name
RUN_KEYS = {"seed", "n_paths", "n_steps", "s", "t", "x", "y", "theta", "p",
            "horizons", "tol", "out", "workers"}

_POSITIVE = {"n_paths", "n_steps", "workers"}


class RunConfig:
    """Validated bag of run parameters; unknown keys are rejected."""

    def __init__(self, instance_key=None, instance_params=None, seed=0,
                 n_paths=20000, n_steps=600, s=0.0, t=0.3, x=None, y=None,
                 theta=1.0, p=2.0, horizons=None, tol=None, out=None,
                 workers=1):
        self.instance_key = instance_key
        self.instance_params = dict(instance_params or {})
        self.seed = seed
        self.n_paths = n_paths
        self.n_steps = n_steps
        self.s = s
        self.t = t
        self.x = x
        self.y = y
        self.theta = theta
        self.p = p
        self.horizons = horizons
        self.tol = tol
        self.out = out
        self.workers = workers
        for name in _POSITIVE:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.t <= self.s:
            raise ConfigError("need t > s")

    def instance(self):
        if self.instance_key is None:
            raise ConfigError("no [instance] section with a 'key' entry")
        return catalog.make_instance(self.instance_key,
                                     **self.instance_params)


def _parse_vector(text):
    return np.array([float(v) for v in text.split(",")], dtype=float)


def _validate_instance_params(key, params):
    """Check the parameter names against the catalog factory signature."""
    factories = {
        "interval-exp": catalog.interval_exp,
        "scaled-disk": catalog.scaled_disk,
        "ricciflow-capband": catalog.ricciflow_capband,
        "halfplane-bump": catalog.halfplane_bump,
    }
    if key not in factories:
        raise ConfigError(f"unknown instance key '{key}'")
    allowed = set(inspect.signature(factories[key]).parameters)
    for name in params:
        if name not in allowed:
            raise ConfigError(
                f"unknown key '{name}' in [instance] for '{key}'")


def load_config(path):
    """Strict INI parse: sections [instance] and [run], unknown keys
    rejected with the offending key named."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file '{path}'")
    kwargs = {}
    for section in parser.sections():
        if section == "instance":
            items = dict(parser.items("instance"))
            if "key" not in items:
                raise ConfigError("[instance] section needs a 'key' entry")
            key = items.pop("key")
            params = {k: float(v) for k, v in items.items()}
            _validate_instance_params(key, params)
            kwargs["instance_key"] = key
            kwargs["instance_params"] = params
        elif section == "run":
            for name, raw in parser.items("run"):
                if name not in RUN_KEYS:
                    raise ConfigError(f"unknown key '{name}' in [run]")
                if name in ("seed", "n_paths", "n_steps", "workers"):
                    kwargs[name] = int(raw)
                elif name in ("s", "t", "theta", "p", "tol"):
                    kwargs[name] = float(raw)
                elif name in ("x", "y"):
                    kwargs[name] = _parse_vector(raw)
                elif name == "horizons":
                    kwargs[name] = tuple(float(v) for v in raw.split(","))
                else:
                    kwargs[name] = raw
            if "workers" not in kwargs:
                env = os.environ.get(WORKERS_ENV)
                if env is not None:
                    kwargs["workers"] = int(env)
        else:
            raise ConfigError(f"unknown section '[{section}]'")
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc))


# ---------------------------------------------------------------------------
# command implementations; each returns a list of CheckReport
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig):
    inst = cfg.instance()
    x0 = cfg.x if cfg.x is not None else inst.x0
    sample = simulate_path(inst, np.asarray(x0, dtype=float), cfg.s, cfg.t,
                           cfg.n_steps, RngStream(cfg.seed, 0))
    if cfg.out is None:
        raise ConfigError("simulate needs an output path (out / --out)")
    sample.to_csv(cfg.out)
    return []


def _harnack_to_check(rep, name):
    return CheckReport(
        check=name, instance=rep.instance, lhs=rep.lhs, rhs=rep.rhs,
        tol=3.0 * (rep.stderr_lhs + rep.stderr_rhs) + 1e-12,
        stderr_lhs=rep.stderr_lhs, stderr_rhs=rep.stderr_rhs,
        params={"p": rep.p, "theta": rep.theta, "S": rep.S, "T": rep.T,
                "coalesce_rate": rep.coalesce_rate})


def cmd_verify_gradient(cfg: RunConfig):
    """Bismut / covariant estimators against the 1-D oracle gradient, and
    against each other on the disk."""
    reports = []
    iv = catalog.make_instance("interval-exp", a=0.5)
    f = lambda xs: 1.0 + 0.5 * np.cos(np.pi * xs[..., 0])
    df = lambda xs: -0.5 * np.pi * np.sin(np.pi * np.asarray(xs)[..., 0:1])
    s, t, xq = 0.0, 0.25, 0.35
    grid = oracle.make_grid(s, t)
    sol = oracle.neumann_heat_solve(iv, f, s, t, grid)
    truth = abs(oracle.grid_gradient_value(sol, grid, iv, s, xq))
    n_steps = max(16, int(round((t - s) / 5e-4)))
    vb, se_b = derivative.bismut_gradient(iv, f, s, t, np.array([xq]),
                                          cfg.n_paths, n_steps, cfg.seed,
                                          n_workers=cfg.workers)
    reports.append(CheckReport(
        check="bismut-vs-oracle", instance=iv.key,
        lhs=abs(float(np.linalg.norm(vb)) - truth), rhs=0.0,
        tol=3.0 * float(np.linalg.norm(se_b)), kind="identity",
        stderr_lhs=float(np.linalg.norm(se_b)),
        params={"x": xq, "truth": truth}))
    gf = lambda tt, ys: df(ys) / np.asarray(
        iv.flow.g(tt, ys), dtype=float)[..., 0]
    vc, se_c = derivative.covariant_gradient(iv, gf, s, t, np.array([xq]),
                                             cfg.n_paths, n_steps,
                                             cfg.seed + 1,
                                             n_workers=cfg.workers)
    reports.append(CheckReport(
        check="covariant-vs-oracle", instance=iv.key,
        lhs=abs(float(np.linalg.norm(vc)) - truth), rhs=0.0,
        tol=3.0 * float(np.linalg.norm(se_c)), kind="identity",
        stderr_lhs=float(np.linalg.norm(se_c)),
        params={"x": xq, "truth": truth}))

    dk = catalog.make_instance("scaled-disk")
    fd = lambda ys: np.asarray(ys)[..., 0]
    dfd = lambda ys: np.stack([np.ones(np.asarray(ys).shape[:-1]),
                               np.zeros(np.asarray(ys).shape[:-1])], axis=-1)
    xd = np.array([0.2, -0.1])
    vb2, se2 = derivative.bismut_gradient(dk, fd, s, t, xd, cfg.n_paths,
                                          n_steps, cfg.seed + 2,
                                          n_workers=cfg.workers)
    gfd = lambda tt, ys: np.einsum(
        "...ij,...j->...i",
        np.linalg.inv(np.asarray(dk.flow.g(tt, ys), dtype=float)), dfd(ys))
    vc2, se3 = derivative.covariant_gradient(dk, gfd, s, t, xd, cfg.n_paths,
                                             n_steps, cfg.seed + 3,
                                             n_workers=cfg.workers)
    comb = 3.0 * (float(np.linalg.norm(se2)) + float(np.linalg.norm(se3)))
    reports.append(CheckReport(
        check="bismut-vs-covariant", instance=dk.key,
        lhs=float(np.linalg.norm(vb2 - vc2)), rhs=0.0, tol=comb,
        kind="identity",
        params={"bismut": float(np.linalg.norm(vb2)),
                "covariant": float(np.linalg.norm(vc2))}))
    return reports


def cmd_verify_coupling(cfg: RunConfig):
    reports = []
    flat = catalog.make_instance("halfplane-bump", amp=0.0)
    cur = coupling.run_coupled_ensemble(
        flat, np.array([-0.3, 0.5]), np.array([0.4, 0.7]), 0.0, 0.2,
        400, cfg.seed, min(cfg.n_paths, 2000), mode="parallel")
    rho0 = float(flat.distance(0.0, np.array([[-0.3, 0.5]]),
                               np.array([[0.4, 0.7]]))[0])
    never_hit = (cur.a.l == 0.0) & (cur.b.l == 0.0) & ~cur.bad
    drift = float(np.max(np.abs(cur.rho[never_hit] - rho0))) \
        if np.any(never_hit) else 0.0
    reports.append(CheckReport(
        check="parallel-flat-distance-constant", instance=flat.key,
        lhs=drift, rhs=0.0, tol=1e-12, kind="identity",
        params={"rho0": rho0, "n_never_hit": int(np.sum(never_hit))}))

    pairs = [("interval-exp", np.array([0.3]), np.array([0.7])),
             ("ricciflow-capband", np.array([math.pi / 2, 0.0]),
              np.array([math.pi / 2, 0.6]))]
    for key, xa, ya in pairs:
        inst = catalog.make_instance(key)
        T = 0.05
        for mode in ("parallel", "mirror"):
            freqs = []
            for n_steps in (100, 1000):
                cur = coupling.run_coupled_ensemble(
                    inst, xa, ya, 0.0, T, n_steps, cfg.seed,
                    min(cfg.n_paths, 2000), mode=mode, record_steps=True)
                mon = coupling.distance_bound_monitor(
                    inst, cur.records, T / n_steps, mode)
                freqs.append(mon.frequency)
            reports.append(CheckReport(
                check=f"monitor-refinement-{mode}", instance=inst.key,
                lhs=freqs[1], rhs=freqs[0] / 4.0, tol=0.0,
                params={"freq_coarse": freqs[0], "freq_fine": freqs[1]}))

    convex = [("interval-exp", {}, np.array([0.3]), np.array([0.7]), 0.4),
              ("scaled-disk", {}, np.array([0.3, 0.1]),
               np.array([-0.2, -0.2]), 0.4),
              ("ricciflow-capband", {}, np.array([math.pi / 2, 0.0]),
               np.array([math.pi / 2, 0.3]), 0.05)]
    for key, kw, xa, ya, T in convex:
        inst = catalog.make_instance(key, **kw)
        lhs, rhs, se = coupling.wasserstein_contraction_estimate(
            inst, xa, ya, 0.0, T, cfg.p, cfg.n_paths,
            max(16, int(round(T / 5e-4))), cfg.seed,
            n_workers=cfg.workers)
        reports.append(CheckReport(
            check="wasserstein-contraction", instance=inst.key, lhs=lhs,
            rhs=rhs, tol=3.0 * se, stderr_lhs=se, params={"p": cfg.p, "T": T}))
    return reports


def cmd_verify_harnack(cfg: RunConfig):
    reports = []
    iv = catalog.make_instance("interval-exp", a=0.5)
    f1 = lambda xs: 1.0 + 0.5 * np.cos(np.pi * xs[..., 0])
    xa, ya = np.array([0.35]), np.array([0.65])
    n_steps = 600
    rep = harnack.log_harnack_verify(iv, f1, xa, ya, 0.0, 0.3,
                                     cfg.n_paths, n_steps, cfg.seed)
    reports.append(_harnack_to_check(rep, "log-harnack"))
    rep = harnack.p_harnack_verify(iv, f1, 2.0, xa, ya, 0.0, 0.3,
                                   cfg.n_paths, n_steps, cfg.seed + 1)
    reports.append(_harnack_to_check(rep, "p-harnack"))

    dk = catalog.make_instance("scaled-disk")
    f2 = lambda ys: 1.0 + np.cos(np.asarray(ys)[..., 0]) ** 2
    xd, yd = np.array([0.2, 0.0]), np.array([-0.2, 0.1])
    rep = harnack.log_harnack_verify(dk, f2, xd, yd, 0.0, 0.3,
                                     cfg.n_paths, n_steps, cfg.seed + 2)
    reports.append(_harnack_to_check(rep, "log-harnack"))
    rep = harnack.p_harnack_verify(dk, f2, 2.0, xd, yd, 0.0, 0.3,
                                   cfg.n_paths, n_steps, cfg.seed + 3)
    reports.append(_harnack_to_check(rep, "p-harnack"))

    run = harnack.girsanov_coupled_run(iv, xa, ya, cfg.theta, 0.3, n_steps,
                                       cfg.seed + 4,
                                       min(cfg.n_paths, 20000))
    mean_r, se_r = harnack.normalization_check(run)
    coal = float(np.mean(run.coalesced[run.ok]))
    reports.append(CheckReport(
        check="girsanov-normalization", instance=iv.key,
        lhs=abs(mean_r - 1.0), rhs=0.0, tol=3.0 * se_r, kind="identity",
        stderr_lhs=se_r, params={"theta": cfg.theta,
                                 "coalesce_rate": coal}))
    reports.append(CheckReport(
        check="girsanov-coalescence", instance=iv.key,
        lhs=1.0 - coal, rhs=0.0, tol=0.02,
        params={"theta": cfg.theta}))

    # psi == 2 time change against the base-flow oracle at 4x horizon
    iv0 = catalog.make_instance("interval-exp", a=0.0)
    T = 0.05
    psi2 = lambda t, x: np.full(np.asarray(x).shape[:-1], 2.0)
    val, se = mc_semigroup(iv0, f1, 0.0, T, np.array([0.4]),
                           min(cfg.n_paths, 40000),
                           max(16, int(round(T / 2e-4))), cfg.seed + 5,
                           n_workers=cfg.workers, psi=psi2)
    grid = oracle.make_grid(0.0, 4.0 * T)
    sol = oracle.neumann_heat_solve(iv0, f1, 0.0, 4.0 * T, grid)
    ref = float(oracle.grid_value(sol, grid, 0.4))
    reports.append(CheckReport(
        check="psi-time-change", instance=iv0.key, lhs=abs(val - ref),
        rhs=0.0, tol=3.0 * se, kind="identity", stderr_lhs=se,
        params={"mc": val, "oracle": ref}))

    hp = catalog.make_instance("halfplane-bump", amp=0.3)
    rep, rep2, _consts = harnack.nonconvex_harnack(
        hp, 4.0, np.array([-0.5, 0.6]), np.array([0.5, 0.8]), 0.0, 0.3,
        min(cfg.n_paths, 20000), n_steps, cfg.seed + 6)
    reports.append(_harnack_to_check(rep, "nonconvex-log-harnack"))
    reports.append(_harnack_to_check(rep2, "nonconvex-p-harnack"))
    return reports


def cmd_verify_curvature(cfg: RunConfig):
    return verify.curvature_identification_suite(seed=cfg.seed,
                                                 n_paths=cfg.n_paths)


def cmd_verify_suite(cfg: RunConfig):
    reports, _ = verify.run_suite(seed=cfg.seed, n_paths=cfg.n_paths,
                                  n_workers=cfg.workers)
    return reports


def cmd_oracle_compare(cfg: RunConfig):
    reports = []
    fns = [("cosine", lambda xs: 1.0 + 0.5 * np.cos(np.pi * xs[..., 0])),
           ("bump", lambda xs: xs[..., 0] ** 2 * (1.0 - xs[..., 0]) ** 2),
           ("affine", lambda xs: 1.0 + 0.25 * xs[..., 0])]
    s, t, xq = 0.0, 0.3, 0.4
    dt = (t - s) / cfg.n_steps
    for a in (0.0, 0.5):
        inst = catalog.make_instance("interval-exp", a=a)
        grid = oracle.make_grid(s, t)
        for name, f in fns:
            sol = oracle.neumann_heat_solve(inst, f, s, t, grid)
            ref = float(oracle.grid_value(sol, grid, xq))
            val, se = mc_semigroup(inst, f, s, t, np.array([xq]),
                                   cfg.n_paths, cfg.n_steps, cfg.seed,
                                   n_workers=cfg.workers)
            reports.append(CheckReport(
                check=f"oracle-compare-{name}", instance=inst.key,
                lhs=abs(val - ref), rhs=0.0, tol=3.0 * se + 2.0 * dt,
                kind="identity", stderr_lhs=se,
                params={"a": a, "mc": val, "oracle": ref}))
        one, se1 = mc_semigroup(inst, lambda xs: np.ones(xs.shape[:-1]),
                                s, t, np.array([xq]), min(cfg.n_paths, 2000),
                                cfg.n_steps, cfg.seed)
        reports.append(CheckReport(
            check="oracle-compare-conservative", instance=inst.key,
            lhs=abs(one - 1.0), rhs=0.0, tol=1e-12, kind="identity",
            params={"a": a}))
    return reports


_DISPATCH = {
    "simulate": cmd_simulate,
    "verify-gradient": cmd_verify_gradient,
    "verify-coupling": cmd_verify_coupling,
    "verify-harnack": cmd_verify_harnack,
    "verify-curvature": cmd_verify_curvature,
    "verify-suite": cmd_verify_suite,
    "oracle-compare": cmd_oracle_compare,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def run(command, cfg: RunConfig) -> int:
    """Execute one command; returns the process exit code."""
    if command not in _DISPATCH:
        raise ConfigError(f"unknown command '{command}'")
    reports = _DISPATCH[command](cfg)
    if command != "simulate" and cfg.out is not None:
        write_reports(cfg.out, reports)
    failures = [r for r in reports if not r.passed]
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status} {rep.check} [{rep.instance}] "
              f"lhs={rep.lhs:.6g} rhs={rep.rhs:.6g} tol={rep.tol:.6g}")
    if failures:
        for rep in failures:
            print(f"FAIL {rep.check} [{rep.instance}]", file=sys.stderr)
        raise CheckFailure(f"{len(failures)} of {len(reports)} checks failed")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="riemflow",
        description="simulation / verification runner for reflecting "
                    "diffusions under evolving metrics")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config is not None:
            cfg = load_config(args.config)
        else:
            workers = int(os.environ.get(WORKERS_ENV, "1"))
            cfg = RunConfig(workers=workers)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            cfg.workers = args.workers
        if args.out is not None:
            cfg.out = args.out
        return run(args.command, cfg)
    except CheckFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeFailure, RiemflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
