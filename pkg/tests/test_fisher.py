import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fimident.errors import GridMismatch, NoFeasibleAlpha, ZeroPerturbation
from fimident.fisher import (FimReport, build_nfim, calibrate_alpha, ellipsoid_volume,
                             empirical_nfim, ncrlb, nfim_at_estimates, perturbed, rank_of, score,
                             summarize_nfim)
from fimident.measure import synthesize
from fimident.oracle import FunctionOracle
from fimident.params import ParamEntry, ParameterVector

from conftest import linear_oracle, scalar

T = np.arange(1.0, 101.0)
SIGMA = 0.1
F_LIN = float(T @ T) / SIGMA**2


def vec(*vals):
    return ParameterVector(tuple(ParamEntry(f"p{i}", v) for i, v in enumerate(vals)))


# --- volume and bound -------------------------------------------------------

@pytest.mark.parametrize("lam,expected", [((1.0, 1.0), math.pi), ((1.0, 1.0, 1.0), 4 * math.pi / 3),
                                          ((4.0,), 1.0)])
def test_volume_unit_cases(lam, expected):
    assert abs(ellipsoid_volume(lam) - expected) <= 1e-12 * expected


def test_volume_rank_deficient():
    assert ellipsoid_volume([1.0, 0.0]) == math.inf
    assert ellipsoid_volume([1.0, 1e-14]) == math.inf
    with pytest.raises(ValueError):
        ellipsoid_volume([])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=6), st.floats(1.1, 100.0))
def test_volume_scales_with_information(lam, c):
    v = ellipsoid_volume(lam)
    # more information in every direction shrinks the ellipsoid by c^(-P/2)
    assert ellipsoid_volume(np.asarray(lam) * c) == pytest.approx(v * c ** (-len(lam) / 2), rel=1e-10)


def test_ncrlb_examples():
    assert ncrlb(np.array([[4.0]]))[0] == 0.25
    assert ncrlb(np.array([[9.04e15]]))[0] == pytest.approx(1.106e-16, rel=5e-3)
    assert np.allclose(ncrlb(np.diag([2.0, 4.0])), [0.5, 0.25])
    assert np.all(np.isinf(ncrlb(build_nfim([1.0, 2.0]))))
    assert ncrlb(np.array([[0.0]]))[0] == math.inf


# --- outer products ---------------------------------------------------------

def test_build_nfim_examples():
    assert np.array_equal(build_nfim([2.0, 3.0]), [[4.0, 6.0], [6.0, 9.0]])
    assert np.array_equal(build_nfim([0.0, 0.0]), np.zeros((2, 2)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6))
def test_build_nfim_rank_one(s):
    F = build_nfim(s)
    lam = np.linalg.eigvalsh(F)
    s = np.asarray(s)
    assert np.allclose(F, F.T)
    assert rank_of(lam) <= 1
    assert lam.max() == pytest.approx(s @ s, rel=1e-9, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_summary_permutation_invariant(P, seed):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(3 * P, P))
    p = vec(*rng.uniform(1, 2, P))
    perm = rng.permutation(P)
    a = summarize_nfim(S, p, np.full(P, 0.1), np.ones(P), 1.0)
    q = ParameterVector(tuple(p.entries[i] for i in perm))
    b = summarize_nfim(S[:, perm], q, np.full(P, 0.1), np.ones(P), 1.0)
    assert np.allclose(b.nfim, a.nfim[np.ix_(perm, perm)])
    assert b.v_e == pytest.approx(a.v_e, rel=1e-9)
    assert np.allclose(b.ncrlb, a.ncrlb[perm], rtol=1e-9)


# --- score ------------------------------------------------------------------

def test_score_identical_curves():
    orc = linear_oracle()
    p = scalar(value=2.0)
    z = synthesize(orc(p), SIGMA, seed=1)
    assert score(z, orc(p), orc(p), 0.01, 2.0) == 0.0


def test_score_errors():
    orc = linear_oracle()
    z = synthesize(orc(scalar()), SIGMA, seed=1)
    with pytest.raises(ZeroPerturbation):
        score(z, z.base, z.base, 0.0, 2.0)
    with pytest.raises(GridMismatch):
        score(z, z.base.samples[:-1], z.base.samples[:-1], 0.1, 2.0)


@pytest.mark.parametrize("alpha", [1e-3, 1e-2])
def test_score_against_analytic(alpha):
    # for y = p t the finite-difference score differs from the analytic one by
    # exactly alpha p sum(t^2) / (2 sigma^2)
    orc, p = linear_oracle(), scalar(value=2.0)
    yb = orc(p)
    z = synthesize(yb, SIGMA, seed=4)
    s_num = score(z, yb, orc(perturbed(p, 0, alpha)), alpha, 2.0)
    s_an = -float((z.z - yb.samples) @ T) / SIGMA**2
    bias = alpha * 2.0 * float(T @ T) / (2 * SIGMA**2)
    assert s_num - s_an == pytest.approx(bias, rel=1e-6)


def test_empirical_nfim_matches_gaussian_fim():
    orc, p = linear_oracle(), scalar(value=2.0)
    rep = empirical_nfim(orc, p, SIGMA, seeds=range(10_000), alphas=1e-7)
    assert rep.nfim[0, 0] == pytest.approx(F_LIN, rel=0.05)
    assert rep.ncrlb[0] == pytest.approx(1 / F_LIN, rel=0.05)


def test_empirical_nfim_bias_term():
    # with a finite alpha the averaged square picks up (alpha p F / 2)^2
    orc, p = linear_oracle(), scalar(value=2.0)
    a = 1e-4
    rep = empirical_nfim(orc, p, SIGMA, seeds=range(4000), alphas=a)
    expected = F_LIN + (a * 2.0 * F_LIN / 2) ** 2
    assert rep.nfim[0, 0] == pytest.approx(expected, rel=0.05)


def _two_param(n=200):
    t = np.linspace(0.0, 10.0, n)
    return FunctionOracle(lambda v: v[0] * np.exp(-t / v[1]), n, dt=t[1])


def test_single_seed_rank_one():
    orc = _two_param()
    rep = empirical_nfim(orc, vec(1.0, 3.0), 0.01, seeds=[7], alphas=[1e-3, 1e-3])
    assert rep.rank == 1 and not rep.full_rank
    assert rep.v_e == math.inf
    assert json_roundtrip_inf(rep)


def json_roundtrip_inf(rep: FimReport) -> bool:
    import json
    d = json.loads(rep.dumps())
    return d["v_e"] == "inf" and d["rank"] == 1


def test_five_parameters_full_rank():
    t = np.linspace(0.0, 5.0, 300)

    def fn(v):
        return v[0] + v[1] * t + v[2] * np.sin(v[3] * t) + np.exp(-v[4] * t)

    orc = FunctionOracle(fn, t.size, dt=t[1])
    rep = empirical_nfim(orc, vec(1.0, 0.5, 0.3, 2.0, 0.7), 0.05, seeds=range(10), alphas=1e-3)
    assert rep.full_rank and math.isfinite(rep.v_e)
    assert rep.v_e_pu == pytest.approx(rep.v_e / np.prod(np.abs(rep.values)), rel=1e-12)


def test_calibrate_alpha_minimal_on_grid():
    orc, p = _two_param(), vec(1.0, 3.0)
    grid = np.geomspace(1e-3, 1.0, 50)
    a, sd = calibrate_alpha(orc, p, 1, 0.01, C=1.05, grid=grid)
    assert sd > 1.05 * 0.01
    i = int(np.argmin(np.abs(grid - a)))
    prev = np.std(orc(perturbed(p, 1, grid[i - 1])).samples - orc(p).samples)
    assert prev <= 1.05 * 0.01


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-4, 5e-2))
def test_calibrate_alpha_monotone_in_noise(sigma_n):
    orc, p = _two_param(), vec(1.0, 3.0)
    a1, _ = calibrate_alpha(orc, p, 1, sigma_n)
    try:
        a2, _ = calibrate_alpha(orc, p, 1, 2 * sigma_n)
    except NoFeasibleAlpha:
        return
    assert a2 >= a1


def test_calibrate_alpha_no_influence():
    t = np.linspace(0, 1, 50)
    orc = FunctionOracle(lambda v: v[0] * t, 50)
    with pytest.raises(NoFeasibleAlpha) as info:
        calibrate_alpha(orc, vec(1.0, 2.0), 1, 0.01)
    assert info.value.path == "p1"


def test_calibrate_alpha_speed_channel(ieee9, coarse_scenario):
    from fimident.harness import SM1_TARGETS
    from fimident.measure import noise_sigma_from_snr
    from fimident.oracle import SimOracle
    orc = SimOracle(ieee9, coarse_scenario, "SM1.omega_m")
    K = SM1_TARGETS[0]
    p = ParameterVector((ParamEntry(K.path, K.true),))
    sigma_n = noise_sigma_from_snr(orc(p), 80.0)
    # permanent droop pulls the post-event mean speed slightly below 62.83 rad/s
    assert sigma_n == pytest.approx(0.006283, rel=0.01)
    grid = np.geomspace(1e-3, 1.0, 50)
    a, sd = calibrate_alpha(orc, p, 0, sigma_n, grid=grid)
    assert sd > sigma_n
    i = int(np.argmin(np.abs(grid - a)))
    if i > 0:
        prev = np.std(orc(perturbed(p, 0, grid[i - 1])).samples - orc(p).samples)
        assert prev <= 1.05 * sigma_n


def test_nfim_at_estimates_fresh_vs_reused():
    orc = linear_oracle()
    ests = [scalar(value=v) for v in (1.99, 2.0, 2.01)]
    rep = nfim_at_estimates(orc, ests, SIGMA, [1e-7], seeds=[1, 2, 3])
    assert rep.realizations == 3 and rep.values[0] == pytest.approx(2.0)
    zs = [synthesize(orc(e), SIGMA, s) for e, s in zip(ests, (1, 2, 3))]
    again = nfim_at_estimates(orc, ests, SIGMA, [1e-7], measurements=zs)
    assert again.nfim[0, 0] == pytest.approx(rep.nfim[0, 0], rel=1e-6)
    with pytest.raises(ValueError):
        nfim_at_estimates(orc, ests, SIGMA, [1e-7], seeds=[1])
