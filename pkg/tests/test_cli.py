"""Entry-point behaviour: strict config, exit codes, CSV determinism."""

import numpy as np
import pytest

from riemflow import cli
from riemflow.cli import RunConfig, load_config, main
from riemflow.errors import CheckFailure, ConfigError
from riemflow.verify import CheckReport


def write_cfg(tmp_path, body, name="run.ini"):
    p = tmp_path / name
    p.write_text(body)
    return str(p)


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def test_config_roundtrip(tmp_path):
    path = write_cfg(tmp_path, """
[instance]
key = interval-exp
a = 0.25

[run]
seed = 3
n_paths = 500
n_steps = 50
t = 0.2
x = 0.4
""")
    cfg = load_config(path)
    assert cfg.instance_key == "interval-exp"
    assert cfg.instance_params == {"a": 0.25}
    assert cfg.seed == 3
    assert np.array_equal(cfg.x, [0.4])
    inst = cfg.instance()
    assert inst.params["a"] == 0.25


def test_unknown_run_key_named(tmp_path):
    path = write_cfg(tmp_path, "[run]\nbogus_key = 1\n")
    with pytest.raises(ConfigError, match="bogus_key"):
        load_config(path)


def test_unknown_instance_param_named(tmp_path):
    path = write_cfg(tmp_path, "[instance]\nkey = interval-exp\nslope = 2\n")
    with pytest.raises(ConfigError, match="slope"):
        load_config(path)


def test_unknown_section_rejected(tmp_path):
    path = write_cfg(tmp_path, "[extras]\nfoo = 1\n")
    with pytest.raises(ConfigError, match="extras"):
        load_config(path)


def test_unknown_instance_key(tmp_path):
    path = write_cfg(tmp_path, "[instance]\nkey = torus\n")
    with pytest.raises(ConfigError, match="torus"):
        load_config(path)


def test_positive_fields_validated():
    with pytest.raises(ConfigError):
        RunConfig(n_paths=0)
    with pytest.raises(ConfigError):
        RunConfig(seed=-1)
    with pytest.raises(ConfigError):
        RunConfig(s=0.5, t=0.2)


def test_workers_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "5")
    path = write_cfg(tmp_path, "[run]\nseed = 1\n")
    assert load_config(path).workers == 5


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------


def test_exit_2_on_bad_config(tmp_path, capsys):
    path = write_cfg(tmp_path, "[run]\nbogus = 1\n")
    code = main(["verify-suite", "--config", path])
    assert code == 2
    assert "bogus" in capsys.readouterr().err


def test_exit_1_on_check_failure(monkeypatch, capsys):
    failing = [CheckReport("doomed", "interval-exp", lhs=2.0, rhs=1.0,
                           tol=0.0)]
    monkeypatch.setitem(cli._DISPATCH, "verify-gradient",
                        lambda cfg: failing)
    code = main(["verify-gradient"])
    assert code == 1
    assert "doomed" in capsys.readouterr().err


def test_exit_3_on_runtime_failure(monkeypatch, capsys):
    def boom(cfg):
        raise cli.RuntimeFailure("sampler exploded")
    monkeypatch.setitem(cli._DISPATCH, "verify-gradient", boom)
    assert main(["verify-gradient"]) == 3


def test_run_raises_check_failure_directly(monkeypatch):
    failing = [CheckReport("doomed", "x", lhs=2.0, rhs=1.0, tol=0.0)]
    monkeypatch.setitem(cli._DISPATCH, "verify-gradient", lambda cfg: failing)
    with pytest.raises(CheckFailure):
        cli.run("verify-gradient", RunConfig())


# ---------------------------------------------------------------------------
# simulate + CSV determinism
# ---------------------------------------------------------------------------


def test_simulate_deterministic_csv(tmp_path):
    cfgp = write_cfg(tmp_path, """
[instance]
key = scaled-disk

[run]
seed = 2
n_steps = 100
t = 0.05
x = 0.2,0.1
""")
    out1, out2 = tmp_path / "p1.csv", tmp_path / "p2.csv"
    assert main(["simulate", "--config", cfgp, "--out", str(out1)]) == 0
    assert main(["simulate", "--config", cfgp, "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert out1.read_text().startswith("# riemflow path sample v1\n")


def test_oracle_compare_worker_independent_csv(tmp_path):
    cfgp = write_cfg(tmp_path, """
[instance]
key = interval-exp

[run]
seed = 1
n_paths = 2000
n_steps = 100
t = 0.1
""")
    out1, out2 = tmp_path / "w1.csv", tmp_path / "w2.csv"
    assert main(["oracle-compare", "--config", cfgp, "--out", str(out1),
                 "--workers", "1"]) == 0
    assert main(["oracle-compare", "--config", cfgp, "--out", str(out2),
                 "--workers", "4"]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    header = out1.read_text().splitlines()[0]
    assert header == "# riemflow check report v1"


def test_cli_flags_override_config(tmp_path):
    cfgp = write_cfg(tmp_path, "[run]\nseed = 1\nworkers = 2\n")
    cfg = load_config(cfgp)
    assert cfg.seed == 1 and cfg.workers == 2
