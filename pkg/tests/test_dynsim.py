import numpy as np
import pytest

from fimident.dynsim import (AvrState, ChannelSpec, GovernorState, Scenario, Trace, avr_step,
                             governor_step, inertia_constant_si, network_solve, simulate)
from fimident.errors import ConfigError, SingularNetwork
from fimident.model import AvrSEXS, GovernorIEEEG3

CH = [ChannelSpec.parse(c) for c in
      ("SM1.omega_m", "SM1.omega_e", "SM1.P_e", "SM1.P_m", "SM1.T_m", "SM1.E_fd", "bus6.V_rms",
       "SM2.omega_m", "SM1.V_rms")]


def test_flat_start_holds(ieee9, ieee9_op):
    traces = simulate(ieee9, ieee9_op, {}, Scenario(t_end=20.0, dt=1e-3), CH)
    for tr in traces:
        y0 = tr.samples[0]
        assert np.max(np.abs(tr.samples - y0)) < 1e-6 * abs(y0), tr.channel.label


def test_energization_dip_and_settle(ieee9, ieee9_op, coarse_scenario):
    (w,) = simulate(ieee9, ieee9_op, {}, coarse_scenario, [CH[0]])
    pre = w.samples[0]
    assert pre == pytest.approx(2 * np.pi * 60 * 2 / 12)
    assert w.samples.min() < pre - 1e-3
    # after the nadir the swing has largely died out
    tail = w.samples[w.t > 8.0]
    assert np.ptp(tail) < 0.2 * (pre - w.samples.min())


def test_deterministic(ieee9, ieee9_op, coarse_scenario):
    a = simulate(ieee9, ieee9_op, {}, coarse_scenario, CH[:3])
    b = simulate(ieee9, ieee9_op, {}, coarse_scenario, CH[:3])
    for x, y in zip(a, b):
        assert np.array_equal(x.samples, y.samples)


def test_step_halving_converges(ieee9, ieee9_op):
    ch = [CH[0]]
    coarse = simulate(ieee9, ieee9_op, {}, Scenario(5.0, 4e-3, _events(ieee9)), ch)[0]
    fine = simulate(ieee9, ieee9_op, {}, Scenario(5.0, 2e-3, _events(ieee9)), ch)[0]
    dev = np.max(np.abs(coarse.samples - fine.samples[::2][: len(coarse)]))
    swing = np.ptp(fine.samples)
    assert dev < 1e-3 * swing


def _events(model):
    from fimident.dynsim import load_energization_scenario
    return load_energization_scenario(model).events


def test_channel_identities(ieee9, ieee9_op, coarse_scenario):
    w_m, w_e, _, p_m, t_m, *_ = simulate(ieee9, ieee9_op, {}, coarse_scenario, CH)
    assert np.allclose(w_e.samples, 6 * w_m.samples, rtol=1e-14)
    om_pu = w_m.samples / w_m.samples[0]
    assert np.allclose(t_m.samples * om_pu, p_m.samples, rtol=1e-12)


def test_swing_equation_consistency(ieee9, ieee9_op, coarse_scenario):
    # J dw/dt = T_m - T_e in SI, checked by finite differences on the recorded trace
    chans = [ChannelSpec.parse(c) for c in ("SM1.omega_m", "SM1.T_m", "SM1.T_e")]
    w, tm, te = simulate(ieee9, ieee9_op, {}, coarse_scenario, chans)
    sm1 = ieee9.machines[0]
    J = inertia_constant_si(ieee9, 0)
    w_base = w.samples[0]
    t_base = sm1.s_rated * 1e6 / w_base
    dw = np.gradient(w.samples, w.dt)
    rhs = (tm.samples - te.samples) * t_base / J
    mask = (w.t > 1.2) & (w.t < 9.0)
    err = np.max(np.abs(dw[mask] - rhs[mask]))
    assert err < 0.02 * np.max(np.abs(rhs[mask]))


def _gov():
    g = GovernorIEEEG3()
    return GovernorIEEEG3(P_ref=g.sigma / g.K_t * 0.6)


def test_governor_equilibrium_holds():
    gov = _gov()
    st = GovernorState.equilibrium(gov, 0.6)
    for _ in range(500):
        st, pm = governor_step(st, 0.0, gov, 0.01)
    assert pm == pytest.approx(0.6, abs=1e-12)


def test_governor_dc_gain():
    gov = _gov()
    st = GovernorState.equilibrium(gov, 0.6)
    dw = -2e-3
    # slowest closed-loop mode is T_r (sigma + delta) / sigma, about 105 s
    for _ in range(40000):
        st, pm = governor_step(st, dw, gov, 0.05)
    gain = (pm - 0.6) / -dw
    assert gain == pytest.approx(gov.K_t / gov.sigma, rel=0.01)


def test_governor_rate_clamp():
    gov = _gov()
    st = GovernorState.equilibrium(gov, 0.6)
    dt = 0.01
    for _ in range(300):
        new, _ = governor_step(st, -0.5, gov, dt)
        assert new.g - st.g <= gov.gdot_max * dt * (1 + 1e-12)
        st = new
    assert gov.g_min <= st.g <= gov.g_max


def test_governor_rejects_bad_dt():
    gov = _gov()
    with pytest.raises(ValueError):
        governor_step(GovernorState.equilibrium(gov, 0.6), 0.0, gov, 0.0)


def test_avr_setpoint_inverted():
    avr = AvrSEXS(V_ref=2.0 / 20.0 + 1.0)
    st = AvrState.equilibrium(avr, 2.0)
    for _ in range(20000):
        st, efd = avr_step(st, avr.V_ref - 2.0 / avr.K, avr, 5e-3)
    assert efd == pytest.approx(2.0, rel=1e-9)


def test_avr_dc_gain():
    avr = AvrSEXS(V_ref=1.0)
    st = AvrState.equilibrium(avr, 0.0)
    e = 0.01
    for _ in range(40000):
        st, efd = avr_step(st, avr.V_ref - e, avr, 5e-3)
    assert efd / e == pytest.approx(avr.K, rel=1e-3)


def test_avr_clamp():
    avr = AvrSEXS(V_ref=1.0)
    st = AvrState.equilibrium(avr, 0.0)
    for _ in range(5000):
        st, efd = avr_step(st, 0.0, avr, 5e-3)
        assert efd <= avr.E_max
    assert efd == avr.E_max


def test_network_two_bus_divider():
    # source 1 pu behind z_s into bus 1, line z_l to bus 2, load z_d at bus 2
    zs, zl, zd = 0.1j, 0.05 + 0.2j, 1.0 + 0.5j
    G = np.array([[1 / zs + 1 / zl, -1 / zl], [-1 / zl, 1 / zl + 1 / zd]])
    v = network_solve(G, np.array([1.0 / zs, 0.0]))
    i = 1.0 / (zs + zl + zd)
    assert v[1] == pytest.approx(i * zd, rel=1e-12)
    assert v[0] == pytest.approx(i * (zl + zd), rel=1e-12)


def test_network_identity():
    i = np.array([1.0 + 2j, -3.0, 0.5j])
    assert np.allclose(network_solve(np.eye(3, dtype=complex), i), i)


def test_network_zero_row():
    G = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(SingularNetwork):
        network_solve(G, np.array([1.0, 1.0]))
    with pytest.raises(SingularNetwork):
        network_solve(np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([1.0, 0.0]))


def test_trace_csv_round_trip(tmp_path):
    tr = Trace(ChannelSpec.parse("SM1.omega_m"), 0.0, 0.01, np.linspace(62.0, 63.0, 7))
    tr.to_csv(tmp_path / "t.csv")
    back = Trace.from_csv(tmp_path / "t.csv")
    assert back.channel == tr.channel and back.same_grid(tr)
    assert np.array_equal(back.samples, tr.samples)


@pytest.mark.parametrize("text", ["SM1", "SM1.nope", "bus6.omega_m"])
def test_bad_channel(text):
    with pytest.raises(ConfigError):
        ChannelSpec.parse(text)


def test_scenario_validation():
    with pytest.raises(ConfigError):
        Scenario(t_end=1.0, dt=0.0)
    with pytest.raises(ConfigError):
        Scenario(t_end=1.0, dt=0.01, method="euler")
