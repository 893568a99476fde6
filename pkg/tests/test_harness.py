import json
import math

import numpy as np
import pytest

from fimident.errors import AllChannelsInfeasible, ConfigError, NumericalInstability, StudyFailure
from fimident.harness import (SINGLE_COLUMNS, SM1_TARGETS, StudyConfig, StudyReport, derive_seed,
                              export_report, monte_carlo_study, rises_then_plateaus,
                              run_algorithm1)


def small(**kw) -> StudyConfig:
    base = dict(t_end=20.0, dt=5e-3, trials=4, realizations=8, parameters=SM1_TARGETS[:2])
    base.update(kw)
    return StudyConfig(**base)


@pytest.fixture(scope="module")
def small_report():
    return monte_carlo_study(small())


def test_config_round_trip(tmp_path):
    cfg = small(channels=("SM1.omega_m", "SM1.P_e"), mode="multi", seed=7)
    cfg.save(tmp_path / "c.json")
    assert StudyConfig.load(tmp_path / "c.json") == cfg
    assert StudyConfig.from_json(json.loads(cfg.dumps())) == cfg


@pytest.mark.parametrize("bad", [
    dict(trials=0), dict(channels=()), dict(mode="both"), dict(C=0.5), dict(channels=("SM1",)),
    dict(excluded_at="p_hat"),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        small(**bad)


def test_config_p0_out_of_bounds():
    d = small().to_json()
    d["parameters"][0]["p0"] = 100.0
    with pytest.raises(ConfigError):
        StudyConfig.from_json(d)
    with pytest.raises(ConfigError):
        StudyConfig.from_json({**small().to_json(), "bogus": 1})


def test_target_bases():
    td = SM1_TARGETS[-1]
    assert td.path == "SM1.gov.T_d" and td.pu_base == 0.02
    assert SM1_TARGETS[0].pu_base == 20.0


def test_derive_seed():
    a = derive_seed(1, 0, 0, 5)
    assert a == derive_seed(1, 0, 0, 5)
    assert len({a, derive_seed(1, 0, 0, 6), derive_seed(1, 0, 1, 5), derive_seed(2, 0, 0, 5)}) == 4
    assert 0 <= a < 2**63


def test_single_study_structure(small_report):
    rep = small_report
    assert len(rep.studies) == 2 and rep.n_failed == 0
    for s in rep.studies:
        est, fim = s["estimates"], s["fim"]
        assert len(est["values"]) == 4
        assert all(v >= 0 for v in est["var_p"])
        assert est["var_p_pu"][0] == pytest.approx(est["var_p"][0] / s["pu_base"][0] ** 2)
        assert fim["realizations"] == 4
        assert len(fim["crlb_dominance"]) == 1
    rk = rep.rankings[0]
    assert rk["defined"] and sorted(rk["rank_v_e_pu"]) == [1, 2]


def test_single_trial_variance_absent():
    rep = monte_carlo_study(small(trials=1, parameters=SM1_TARGETS[:1]))
    est = rep.studies[0]["estimates"]
    assert est["var_p"] is None and est["var_p_defined"] is False
    assert rep.rankings == [{"channel": "SM1.omega_m", "defined": False}]


def test_export_deterministic(tmp_path, small_report):
    a = export_report(small_report, tmp_path / "a")
    b = export_report(small_report, tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()
    head = (tmp_path / "a" / "table_single.csv").read_text().splitlines()
    assert head[0].split(",") == SINGLE_COLUMNS and len(head) == 3
    assert (tmp_path / "a" / "trace_SM1_omega_m.csv").exists()
    assert any(p.name.startswith("convergence_") for p in a)
    json.loads((tmp_path / "a" / "study.json").read_text())


def test_export_empty(tmp_path):
    export_report(StudyReport(config={}), tmp_path)
    assert (tmp_path / "table_single.csv").read_text().strip() == ",".join(SINGLE_COLUMNS)
    assert (tmp_path / "table_multi.csv").read_text().count("\n") == 1
    d = json.loads((tmp_path / "study.json").read_text())
    assert d["studies"] == [] and d["selected_channel"] is None


def test_failure_threshold(monkeypatch):
    cfg = small(trials=2, parameters=SM1_TARGETS[:1], max_fail_fraction=0.0)
    import fimident.harness as h

    def broken(*a, **k):
        raise NumericalInstability("forced")

    monkeypatch.setattr(h, "fit", broken)
    with pytest.raises(StudyFailure) as info:
        monte_carlo_study(cfg)
    rep = info.value.report
    assert rep.n_failed == 2 and rep.studies[0]["estimates"] is None


def test_algorithm1_single_channel():
    res = run_algorithm1(small(parameters=SM1_TARGETS[:1]))
    assert res.selected == "SM1.omega_m"
    assert math.isfinite(res.v_e["SM1.omega_m"])
    assert res.estimation.p_hat.values[0] == pytest.approx(20.0, rel=0.05)


def test_algorithm1_blind_channel_never_selected():
    # SM2 has no exciter, so its field voltage ignores every SM1 parameter
    res = run_algorithm1(small(parameters=SM1_TARGETS[:1], channels=("SM2.E_fd", "SM1.omega_m")))
    assert res.v_e["SM2.E_fd"] == math.inf and "SM2.E_fd" in res.errors
    assert res.selected == "SM1.omega_m"
    with pytest.raises(AllChannelsInfeasible):
        run_algorithm1(small(parameters=SM1_TARGETS[:1], channels=("SM2.E_fd",)))


def test_plateau_detector():
    a = np.geomspace(1e-3, 1, 25)
    assert rises_then_plateaus(a, 1 - np.exp(-a / 0.01))[0]
    assert not rises_then_plateaus(a, a**2)[0]
    assert not rises_then_plateaus(a, 1 / a)[0]


def test_linear_sweep_matches_closed_form():
    # for y = p t with fresh noise around y(p): E[s^2] = F + (alpha p F / 2)^2
    from conftest import linear_oracle, scalar
    from fimident.harness import SweepResult, sweep_scores
    from fimident.measure import synthesize
    orc, p, sigma = linear_oracle(), scalar(value=2.0), 0.1
    t = np.arange(1.0, 101.0)
    F = float(t @ t) / sigma**2
    alphas = np.concatenate([np.geomspace(1e-6, 1e-2, 12), [1.0]])
    zs = [synthesize(orc(p), sigma, seed) for seed in range(10_000)]
    res = SweepResult("p", "toy", alphas, sweep_scores(orc, p, 0, alphas, zs), 2.0)
    model = F + (alphas * 2.0 * F / 2) ** 2
    assert res.normalized[-1] == 1.0
    assert np.allclose(res.normalized, model / model[-1], rtol=0.05)


def test_export_with_infeasible_alpha(tmp_path, monkeypatch):
    import fimident.harness as h
    from fimident.errors import NoFeasibleAlpha

    def infeasible(ctx, at):
        raise NoFeasibleAlpha(at.paths[0], 0.0, 1.0)

    monkeypatch.setattr(h, "_calibrate", infeasible)
    rep = monte_carlo_study(small(trials=2, parameters=SM1_TARGETS[:2]))
    assert all(s["fim"]["v_e"] == math.inf for s in rep.studies)
    export_report(rep, tmp_path)
    rows = (tmp_path / "table_single.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[1].split(",")[8] == "inf"
