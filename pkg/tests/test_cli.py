import json
import subprocess
import sys

import pytest

from fimident import cli
from fimident.errors import StudyFailure
from fimident.harness import SM1_TARGETS, StudyConfig, StudyReport


@pytest.fixture()
def config(tmp_path):
    path = tmp_path / "cfg.json"
    StudyConfig(t_end=20.0, dt=5e-3, trials=3, realizations=6, parameters=SM1_TARGETS[:1]).save(path)
    return str(path)


def run(*argv):
    return cli.main(list(argv))


def test_simulate_measure_fit(tmp_path, config):
    out = tmp_path / "o"
    assert run("simulate", "--config", config, "--out", str(out)) == 0
    trace = out / "trace_SM1.omega_m.csv"
    assert trace.read_text().startswith("t,SM1.omega_m [rad/s]\n")
    assert run("measure", "--config", config, "--trace", str(trace), "--out", str(out)) == 0
    meas = out / "meas_SM1.omega_m.csv"
    assert meas.exists() and meas.with_suffix(".json").exists()
    assert run("fit", "--config", config, "--measurements", str(meas), "--out", str(out)) == 0
    est = json.loads((out / "estimation.json").read_text())
    assert est["p_hat"][0]["value"] == pytest.approx(20.0, rel=0.05)
    assert (out / "fit_log.csv").read_text().startswith("iter,sse,step_norm,damping,accepted")


def test_fim_and_select(tmp_path, config):
    out = tmp_path / "o"
    assert run("fim", "--config", config, "--out", str(out), "--realizations", "4") == 0
    rep = json.loads((out / "fim_SM1.omega_m.json").read_text())
    assert rep["realizations"] == 4 and rep["parameters"] == ["SM1.avr.K"]
    assert run("select", "--config", config, "--out", str(out)) == 0
    assert json.loads((out / "select.json").read_text())["selected_channel"] == "SM1.omega_m"


def test_study_and_sweep(tmp_path, config):
    out = tmp_path / "o"
    assert run("study", "--config", config, "--out", str(out), "--seed", "5") == 0
    d = json.loads((out / "study.json").read_text())
    assert d["config"]["seed"] == 5 and d["config"]["trials"] == 3
    assert run("sweep", "--config", config, "--out", str(out), "--alphas", "0.01,0.1") == 0
    rows = (out / "sweep_SM1.avr.K.csv").read_text().splitlines()
    assert rows[0] == "alpha,nfim,nfim_normalized" and len(rows) == 4
    assert rows[-1].split(",")[2] == "1.0"


def test_config_errors(tmp_path, capsys):
    assert run("study", "--config", str(tmp_path / "missing.json")) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("study", "--config", str(bad)) == 1
    bad.write_text(json.dumps({"trials": 0}))
    assert run("study", "--config", str(bad)) == 1
    assert run("simulate", "--seed", str(2**64), "--out", str(tmp_path)) == 1
    assert "configuration error" in capsys.readouterr().err


def test_numerical_failure(tmp_path, config):
    # at 0 dB the noise swamps every perturbation on the grid
    assert run("fim", "--config", config, "--snr-db", "0", "--out", str(tmp_path)) == 2


def test_study_failure_exit(tmp_path, config, monkeypatch):
    def failing(cfg, parallel=1):
        raise StudyFailure("too many", StudyReport(config=cfg.to_json()))

    monkeypatch.setattr(cli, "monte_carlo_study", failing)
    assert run("study", "--config", config, "--out", str(tmp_path / "o")) == 3
    assert (tmp_path / "o" / "study.json").exists()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "fimident.cli", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0
    for sub in ("simulate", "measure", "fim", "fit", "select", "study", "sweep"):
        assert sub in r.stdout
