"""Channel selection, Monte-Carlo coherency studies and perturbation sweeps.

A study fits the target parameters to many noisy copies of one simulated
transient, then compares the spread of the estimates with the numerical FIM
evaluated at the estimates.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.stats import rankdata, spearmanr

from .dynsim import ChannelSpec, Scenario, Trace, load_energization_scenario
from .errors import (AllChannelsInfeasible, ConfigError, FimIdentError, NoFeasibleAlpha,
                     StudyFailure)
from .estimator import EstimationResult, fit
from .fisher import (FimReport, calibrate_alpha, empirical_nfim, perturbed, score,
                     summarize_nfim, _fnum)
from .measure import RNG_ALGORITHM, MeasurementSet, noise_sigma_from_snr, synthesize
from .model import SystemModel, load_model
from .oracle import SimOracle
from .params import ParamEntry, ParameterVector

# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TargetParam:
    path: str
    true: float
    p0: float
    lower: float
    upper: float
    base: float | None = None
    unit: str = "pu"

    @property
    def pu_base(self) -> float:
        return abs(self.base) if self.base is not None else abs(self.true)


def _target(path, true, p0, unit="pu", base=None):
    return TargetParam(path, true, p0, 0.5 * true, 1.5 * true, base, unit)


# True values and initial guesses for SM1; T_d is reported on a 0.02 s base.
SM1_TARGETS = (
    _target("SM1.avr.K", 20.0, 18.5881),
    _target("SM1.gov.sigma", 0.04, 0.0376),
    _target("SM1.gov.delta", 0.8, 0.8561),
    _target("SM1.gov.K_t", 1.5, 1.5287),
    _target("SM1.gov.T_d", 2.4, 2.6232, unit="s", base=0.02),
)

MODES = ("single", "multi")


@dataclass(frozen=True)
class StudyConfig:
    system: str = "ieee9"
    scenario: dict | None = None
    channels: tuple[str, ...] = ("SM1.omega_m",)
    parameters: tuple[TargetParam, ...] = SM1_TARGETS
    mode: str = "single"
    snr_db: float = 80.0
    C: float = 1.05
    trials: int = 100
    seed: int = 20240601
    zeta: float = 1e-6
    eta: float = 1e-6
    max_iter: int = 50
    realizations: int = 100
    excluded_at: str = "true"
    max_fail_fraction: float = 0.1
    t_end: float = 20.0
    dt: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "parameters", tuple(
            p if isinstance(p, TargetParam) else TargetParam(**p) for p in self.parameters))
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.channels:
            raise ConfigError("at least one candidate channel is required")
        if not self.parameters:
            raise ConfigError("at least one target parameter is required")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.excluded_at not in ("true", "p0"):
            raise ConfigError("excluded_at must be 'true' or 'p0'")
        if self.C < 1:
            raise ConfigError("C must be >= 1")
        if self.realizations < 1:
            raise ConfigError("realizations must be >= 1")
        paths = [p.path for p in self.parameters]
        if len(set(paths)) != len(paths):
            raise ConfigError("duplicate target parameters")
        for p in self.parameters:
            if not (p.lower <= p.p0 <= p.upper and p.lower <= p.true <= p.upper):
                raise ConfigError(f"{p.path}: p0 and true value must lie within bounds")
        for c in self.channels:
            ChannelSpec.parse(c)

    # -- serialization
    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["parameters"] = [asdict(p) for p in self.parameters]
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, d: dict) -> "StudyConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown study config keys: {sorted(unknown)}")
        if "parameters" in d:
            try:
                d["parameters"] = tuple(TargetParam(**p) for p in d["parameters"])
            except TypeError as exc:
                raise ConfigError(f"malformed parameter entry: {exc}") from exc
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "StudyConfig":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    # -- derived objects
    def model(self) -> SystemModel:
        return load_model(self.system)

    def scenario_obj(self, model: SystemModel | None = None) -> Scenario:
        if self.scenario is not None:
            return Scenario.from_json(self.scenario)
        return load_energization_scenario(model or self.model(), self.t_end, self.dt)

    @property
    def paths(self) -> list[str]:
        return [p.path for p in self.parameters]

    def target(self, path: str) -> TargetParam:
        for p in self.parameters:
            if p.path == path:
                return p
        raise KeyError(path)

    def vector(self, paths: Sequence[str], which: str = "p0") -> ParameterVector:
        out = []
        for path in paths:
            t = self.target(path)
            out.append(ParamEntry(path, getattr(t, which), t.unit, t.lower, t.upper,
                                  base=t.pu_base))
        return ParameterVector(tuple(out))

    def fixed_values(self, estimated: Sequence[str]) -> dict[str, float]:
        """Values for configured parameters that are not being estimated."""
        return {p.path: (p.true if self.excluded_at == "true" else p.p0)
                for p in self.parameters if p.path not in estimated}

    def units(self) -> list[tuple[str, ...]]:
        """Parameter groups estimated together: one per parameter, or all at once."""
        if self.mode == "single":
            return [(p,) for p in self.paths]
        return [tuple(self.paths)]


def derive_seed(master: int, *key: int) -> int:
    """Deterministic 63-bit seed for a (master, key...) pair."""
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


# stream tags for derive_seed
_MEAS, _FIM, _ALG1 = 0, 1, 2

# ---------------------------------------------------------------------------
# per-process study context


class _Context:
    """Everything a trial needs for one (channel, parameter group) pair."""

    def __init__(self, cfg: StudyConfig, ci: int, paths: tuple[str, ...]):
        self.cfg = cfg
        self.ci = ci
        self.paths = paths
        model = cfg.model()
        scen = cfg.scenario_obj(model)
        self.truth = cfg.vector(paths, "true")
        self.p0 = cfg.vector(paths, "p0")
        self.oracle = SimOracle(model, scen, cfg.channels[ci], cfg.fixed_values(paths), cache_size=12)
        self.y_true = self.oracle(self.truth)
        self.sigma_n = noise_sigma_from_snr(self.y_true, cfg.snr_db)

    def measurement(self, trial: int) -> MeasurementSet:
        seed = derive_seed(self.cfg.seed, _MEAS, self.ci, trial)
        return synthesize(self.y_true, self.sigma_n, seed, snr_db=self.cfg.snr_db)


_CONTEXTS: dict = {}


def _context(cfg_text: str, ci: int, paths: tuple[str, ...]) -> _Context:
    key = (cfg_text, ci, paths)
    ctx = _CONTEXTS.get(key)
    if ctx is None:
        if len(_CONTEXTS) > 8:
            _CONTEXTS.clear()
        ctx = _Context(StudyConfig.from_json(json.loads(cfg_text)), ci, paths)
        _CONTEXTS[key] = ctx
    return ctx


def _fit_task(args) -> dict:
    cfg_text, ci, paths, trial = args
    ctx = _context(cfg_text, ci, paths)
    z = ctx.measurement(trial)
    try:
        res = fit(ctx.oracle, z, ctx.p0, ctx.cfg.zeta, ctx.cfg.eta, ctx.cfg.max_iter)
    except (FimIdentError, np.linalg.LinAlgError, ValueError) as exc:
        return {"trial": trial, "ok": False, "error": f"{type(exc).__name__}: {exc}"}
    return {"trial": trial, "ok": True, "values": [float(v) for v in res.p_hat.values],
            "iterations": res.iterations, "converged_by": res.converged_by,
            "sse": float(res.residual_final), "log": res.log_csv() if trial == 0 else None}


def _fim_task(args) -> list[float]:
    cfg_text, ci, ui, paths, trial, values, alphas = args
    ctx = _context(cfg_text, ci, paths)
    ph = ctx.p0.with_values(values) if ctx.p0.in_bounds(values) else _loose(ctx.p0, values)
    yb = ctx.oracle(ph)
    z = synthesize(yb, ctx.sigma_n, derive_seed(ctx.cfg.seed, _FIM, ci, ui, trial))
    return [score(z, yb, ctx.oracle(perturbed(ph, k, a)), a, ph.values[k])
            for k, a in enumerate(alphas)]


def _loose(p: ParameterVector, values) -> ParameterVector:
    return ParameterVector(tuple(
        ParamEntry(e.path, float(v), e.unit, alpha=e.alpha, base=e.base)
        for e, v in zip(p.entries, values)))


def _map(fn, tasks: list, parallel: int) -> list:
    if parallel <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=parallel) as ex:
        return list(ex.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * parallel))))


# ---------------------------------------------------------------------------
# report


@dataclass
class StudyReport:
    config: dict
    studies: list[dict] = field(default_factory=list)
    channels: list[dict] = field(default_factory=list)
    rankings: list[dict] = field(default_factory=list)
    selected_channel: str | None = None
    channel_coherent: bool | None = None
    n_failed: int = 0
    artifacts: dict[str, str] = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "rng": RNG_ALGORITHM,
            "studies": self.studies,
            "channels": self.channels,
            "rankings": self.rankings,
            "selected_channel": self.selected_channel,
            "channel_coherent": self.channel_coherent,
            "n_failed": self.n_failed,
        }

    def dumps(self) -> str:
        return json.dumps(_clean(self.to_json()), indent=2, sort_keys=True) + "\n"

    def study(self, channel: str, paths: Sequence[str]) -> dict:
        for s in self.studies:
            if s["channel"] == channel and s["parameters"] == list(paths):
                return s
        raise KeyError((channel, tuple(paths)))


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _fnum(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _ranks(x: Sequence[float]) -> list[int]:
    return [int(r) for r in rankdata(np.asarray(x, dtype=float), method="min")]


def _spearman(a: Sequence[float], b: Sequence[float]) -> float | None:
    if len(a) < 2:
        return None
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        return None
    rho = spearmanr(a, b).statistic
    return None if np.isnan(rho) else float(rho)


# ---------------------------------------------------------------------------
# studies


def _calibrate(ctx: _Context, at: ParameterVector) -> tuple[np.ndarray, np.ndarray]:
    yb = ctx.oracle(at)
    pairs = [calibrate_alpha(ctx.oracle, at, k, ctx.sigma_n, ctx.cfg.C, y_base=yb)
             for k in range(len(at))]
    return np.array([a for a, _ in pairs]), np.array([s for _, s in pairs])


def _run_unit(cfg: StudyConfig, cfg_text: str, ci: int, ui: int, paths: tuple[str, ...],
              parallel: int) -> tuple[dict, dict[str, str]]:
    ctx = _context(cfg_text, ci, paths)
    channel = cfg.channels[ci]
    results = _map(_fit_task, [(cfg_text, ci, paths, t) for t in range(cfg.trials)], parallel)
    ok = [r for r in results if r["ok"]]
    failures = [{"trial": r["trial"], "error": r["error"]} for r in results if not r["ok"]]
    truth, bases = ctx.truth.values, ctx.truth.bases
    P = len(paths)
    study: dict[str, Any] = {
        "channel": channel, "parameters": list(paths), "mode": cfg.mode,
        "sigma_n": ctx.sigma_n, "n_trials": cfg.trials, "n_ok": len(ok),
        "n_failed": len(failures), "failures": failures,
        "p_true": list(truth), "p0": list(ctx.p0.values), "pu_base": list(bases),
        "iterations": [r["iterations"] for r in ok],
        "converged_by": [r["converged_by"] for r in ok],
        "final_sse": [r["sse"] for r in ok],
    }
    artifacts = {}
    if results and results[0]["ok"] and results[0]["log"]:
        artifacts[f"convergence_{_slug(channel)}_{_slug('-'.join(paths))}.csv"] = results[0]["log"]
    if not ok:
        study.update(fim=None, estimates=None)
        return study, artifacts
    est = np.array([r["values"] for r in ok])
    p_bar = est.mean(axis=0)
    rel = np.abs(p_bar - truth) / np.abs(truth) * 100.0
    mare = np.mean(np.abs(est - truth) / np.abs(truth), axis=0) * 100.0
    var = est.var(axis=0, ddof=1) if len(ok) > 1 else None
    study["estimates"] = {
        "trials": [r["trial"] for r in ok],
        "values": est.tolist(),
        "p_bar": list(p_bar),
        "avg_rel_error_pct": list(rel),
        "mean_abs_rel_error_pct": list(mare),
        "var_p": None if var is None else list(var),
        "var_p_pu": None if var is None else list(var / bases ** 2),
        "var_p_defined": var is not None,
    }
    # nFIM at the estimates; alpha calibrated once at the mean estimate
    at = _loose(ctx.p0, p_bar)
    try:
        alphas, sig_d = _calibrate(ctx, at)
    except NoFeasibleAlpha as exc:
        study["fim"] = {"error": str(exc), "v_e": math.inf, "v_e_pu": math.inf}
        return study, artifacts
    tasks = [(cfg_text, ci, ui, paths, r["trial"], r["values"], list(alphas)) for r in ok]
    scores = _map(_fim_task, tasks, parallel)
    rep = summarize_nfim(scores, at, alphas, sig_d, ctx.sigma_n)
    fim = rep.to_json()
    if var is not None:
        fim["crlb_dominance"] = [bool(v >= c) for v, c in zip(var / bases ** 2, rep.ncrlb_pu)]
    study["fim"] = fim
    return study, artifacts


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in s)


def monte_carlo_study(cfg: StudyConfig, parallel: int = 1) -> StudyReport:
    """Run the configured Monte-Carlo study; raises StudyFailure on too many failed fits."""
    cfg_text = json.dumps(cfg.to_json(), sort_keys=True)
    report = StudyReport(config=cfg.to_json())
    for ci, ch in enumerate(cfg.channels):
        for ui, paths in enumerate(cfg.units()):
            study, art = _run_unit(cfg, cfg_text, ci, ui, paths, parallel)
            report.studies.append(study)
            report.artifacts.update(art)
        ctx = _context(cfg_text, ci, cfg.units()[0])
        report.artifacts[f"trace_{_slug(ch)}.csv"] = _trace_csv(ctx)
    report.n_failed = sum(s["n_failed"] for s in report.studies)
    _summarize(cfg, report)
    worst = max((s["n_failed"] / s["n_trials"] for s in report.studies), default=0.0)
    if worst > cfg.max_fail_fraction:
        raise StudyFailure(f"{worst:.0%} of trials failed in at least one study "
                           f"(limit {cfg.max_fail_fraction:.0%})", report)
    return report


def _trace_csv(ctx: _Context) -> str:
    z = ctx.measurement(0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", f"y_true [{ctx.y_true.unit}]", f"z_trial0 [{ctx.y_true.unit}]"])
    for t, y, zz in zip(ctx.y_true.t, ctx.y_true.samples, z.z):
        w.writerow([repr(float(t)), repr(float(y)), repr(float(zz))])
    return buf.getvalue()


def _v_e(study: dict, key: str = "v_e") -> float:
    fim = study.get("fim")
    if not fim:
        return math.inf
    v = fim.get(key, math.inf)
    return math.inf if isinstance(v, str) else float(v)


def _summarize(cfg: StudyConfig, report: StudyReport) -> None:
    if cfg.mode == "single":
        for ch in cfg.channels:
            rows = [s for s in report.studies if s["channel"] == ch]
            if not rows or any(s.get("estimates") is None or not s["estimates"]["var_p_defined"]
                               for s in rows):
                report.rankings.append({"channel": ch, "defined": False})
                continue
            names = [s["parameters"][0] for s in rows]
            ve_pu = [_v_e(s, "v_e_pu") for s in rows]
            var_pu = [s["estimates"]["var_p_pu"][0] for s in rows]
            ve = [_v_e(s) for s in rows]
            var = [s["estimates"]["var_p"][0] for s in rows]
            report.rankings.append({
                "channel": ch, "defined": True, "parameters": names,
                "rank_v_e_pu": _ranks(ve_pu), "rank_var_p_pu": _ranks(var_pu),
                "spearman_pu": _spearman(ve_pu, var_pu),
                "rank_v_e": _ranks(ve), "rank_var_p": _ranks(var),
                "spearman_native": _spearman(ve, var),
                "rank_v_e_native_vs_var_pu": _spearman(ve, var_pu),
            })
        return
    for s in report.studies:
        est = s.get("estimates")
        mean_var = float(np.mean(est["var_p_pu"])) if est and est["var_p_defined"] else None
        report.channels.append({
            "channel": s["channel"], "v_e": _v_e(s), "v_e_pu": _v_e(s, "v_e_pu"),
            "mean_var_p_pu": mean_var,
        })
    finite = [c for c in report.channels if math.isfinite(c["v_e"])]
    if finite:
        sel = min(finite, key=lambda c: c["v_e"])
        report.selected_channel = sel["channel"]
        have = [c for c in finite if c["mean_var_p_pu"] is not None]
        if len(have) == len(finite) and len(finite) > 1:
            best = min(have, key=lambda c: c["mean_var_p_pu"])
            report.channel_coherent = best["channel"] == sel["channel"]


# ---------------------------------------------------------------------------
# channel selection


@dataclass
class Algorithm1Result:
    selected: str
    estimation: EstimationResult
    fim: FimReport
    v_e: dict[str, float]
    errors: dict[str, str]
    measurement: MeasurementSet

    def to_json(self) -> dict:
        return _clean({
            "selected_channel": self.selected,
            "v_e": self.v_e,
            "errors": self.errors,
            "fim": self.fim.to_json(),
            "estimation": self.estimation.to_json(),
            "sigma_n": self.measurement.sigma_n,
        })


def run_algorithm1(cfg: StudyConfig, trial: int = 0) -> Algorithm1Result:
    """Rank candidate channels by nFIM ellipsoid volume at p0, then fit on the best one.

    Measurements are synthesized from the true parameters with the trial's seed.
    """
    paths = tuple(cfg.paths)
    cfg_text = json.dumps(cfg.to_json(), sort_keys=True)
    reports: dict[str, FimReport] = {}
    v_e: dict[str, float] = {}
    errors: dict[str, str] = {}
    for ci, ch in enumerate(cfg.channels):
        ctx = _context(cfg_text, ci, paths)
        seeds = [derive_seed(cfg.seed, _ALG1, ci, r) for r in range(cfg.realizations)]
        try:
            rep = empirical_nfim(ctx.oracle, ctx.p0, ctx.sigma_n, seeds, C=cfg.C)
        except NoFeasibleAlpha as exc:
            errors[ch] = str(exc)
            v_e[ch] = math.inf
            continue
        reports[ch] = rep
        v_e[ch] = rep.v_e
    finite = {c: v for c, v in v_e.items() if math.isfinite(v)}
    if not finite:
        raise AllChannelsInfeasible("no candidate channel gives a finite ellipsoid volume: "
                                    + "; ".join(f"{c}: {e}" for c, e in errors.items()))
    best = min(finite, key=lambda c: (finite[c], cfg.channels.index(c)))
    ctx = _context(cfg_text, cfg.channels.index(best), paths)
    z = ctx.measurement(trial)
    est = fit(ctx.oracle, z, ctx.p0, cfg.zeta, cfg.eta, cfg.max_iter)
    return Algorithm1Result(best, est, reports[best], v_e, errors, z)


# ---------------------------------------------------------------------------
# perturbation sweep


@dataclass
class SweepResult:
    parameter: str
    channel: str
    alphas: np.ndarray
    nfim: np.ndarray
    p_eval: float

    @property
    def normalized(self) -> np.ndarray:
        ref = self.nfim[np.isclose(self.alphas, 1.0)]
        return self.nfim / ref[0]

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "nfim", "nfim_normalized"])
        for a, f, n in zip(self.alphas, self.nfim, self.normalized):
            w.writerow([repr(float(a)), repr(float(f)), repr(float(n))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def sweep_scores(oracle, p: ParameterVector, k: int, alphas: Sequence[float],
                 measurements: Sequence[MeasurementSet]) -> np.ndarray:
    """Scalar nFIM (mean squared score over ``measurements``) at ``p`` for each alpha."""
    yb = oracle(p)
    out = []
    for a in alphas:
        yp = oracle(perturbed(p, k, float(a)))
        out.append(np.mean([score(z, yb, yp, float(a), p.values[k]) ** 2 for z in measurements]))
    return np.array(out)


def perturbation_sweep(cfg: StudyConfig, parameter: str, alphas: Sequence[float],
                       channel: str | None = None) -> SweepResult:
    """Scalar nFIM versus relative perturbation, normalized at alpha = 1.

    Uses one measurement set (trial 0): the parameter is fitted alone from its
    p0 and the nFIM is evaluated at that estimate with the same measurements.
    """
    alphas = np.asarray(sorted(set(float(a) for a in alphas) | {1.0}))
    if np.any(alphas <= 0):
        raise ValueError("alphas must be positive")
    ch = channel or cfg.channels[0]
    if ch not in cfg.channels:
        cfg = StudyConfig.from_json({**cfg.to_json(), "channels": [ch]})
    cfg_text = json.dumps(cfg.to_json(), sort_keys=True)
    ctx = _context(cfg_text, cfg.channels.index(ch), (parameter,))
    z = ctx.measurement(0)
    est = fit(ctx.oracle, z, ctx.p0, cfg.zeta, cfg.eta, cfg.max_iter)
    f = sweep_scores(ctx.oracle, est.p_hat, 0, alphas, [z])
    return SweepResult(parameter, ch, alphas, f, float(est.p_hat.values[0]))


def rises_then_plateaus(alphas: Sequence[float], values: Sequence[float],
                        rise_tol: float = 1e-6, slope_ratio: float = 0.5) -> tuple[bool, dict]:
    """Shape test for a normalized sweep curve: increasing, with one knee into a plateau.

    On log-log axes the curve must be non-decreasing, and the slope over the
    final half-decade of alpha must be at most ``slope_ratio`` times the
    steepest slope before it.
    """
    a = np.log10(np.asarray(alphas, dtype=float))
    v = np.asarray(values, dtype=float)
    info: dict[str, Any] = {}
    if np.any(v <= 0):
        info["reason"] = "non-positive values"
        return False, info
    lv = np.log10(v)
    monotone = bool(np.all(np.diff(v) >= -rise_tol * np.abs(v[:-1])))
    tail = a >= a[-1] - 0.5
    head = ~tail
    if head.sum() < 2 or tail.sum() < 2:
        info["reason"] = "too few points"
        return False, info
    slopes = np.diff(lv) / np.diff(a)
    head_slope = float(np.max(slopes[: head.sum() - 1])) if head.sum() > 1 else 0.0
    tail_slope = float(np.polyfit(a[tail], lv[tail], 1)[0])
    info.update(monotone=monotone, head_slope=head_slope, tail_slope=tail_slope)
    plateau = head_slope > 0 and tail_slope <= slope_ratio * head_slope
    info["plateau"] = bool(plateau)
    return bool(monotone and plateau), info


# ---------------------------------------------------------------------------
# export


SINGLE_COLUMNS = ["channel", "parameter", "p_true", "alpha", "pert_abs", "sigma_d", "avg_nfim",
                  "avg_ncrlb", "avg_v_e", "rank_v_e", "avg_rel_error_pct", "var_p_pu",
                  "rank_var_p"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    x = float(x)
    return repr(x) if math.isfinite(x) else ("inf" if x > 0 else "nan")


def export_report(report: StudyReport, out_dir: str | Path) -> list[Path]:
    """Write study JSON, single- and multi-parameter tables and plot-ready CSVs into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, text: str):
        path = out / name
        path.write_text(text)
        written.append(path)

    put("study.json", report.dumps())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SINGLE_COLUMNS)
    for rk in report.rankings:
        if not rk.get("defined"):
            continue
        for i, name in enumerate(rk["parameters"]):
            s = report.study(rk["channel"], [name])
            fim, est = s["fim"] or {}, s["estimates"]
            # an infeasible alpha leaves only the error and an infinite volume
            col = lambda key: _fmt(fim[key][0]) if key in fim else ""  # noqa: E731
            w.writerow([rk["channel"], name, _fmt(s["p_true"][0]), col("alpha"),
                        col("perturbation_abs"), col("sigma_d"),
                        _fmt(fim["nfim"][0][0]) if "nfim" in fim else "", col("ncrlb"),
                        _fmt(_v_e(s)),
                        rk["rank_v_e_pu"][i], _fmt(est["avg_rel_error_pct"][0]),
                        _fmt(est["var_p_pu"][0]), rk["rank_var_p_pu"][i]])
    put("table_single.csv", buf.getvalue())

    multi = [s for s in report.studies if s["mode"] == "multi"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["parameter", "p_true", "p0"]
    for s in multi:
        c = s["channel"]
        header += [f"{c}.alpha", f"{c}.p_bar", f"{c}.avg_rel_error_pct", f"{c}.var_p_pu"]
    w.writerow(header)
    if multi:
        for i, name in enumerate(multi[0]["parameters"]):
            row = [name, _fmt(multi[0]["p_true"][i]), _fmt(multi[0]["p0"][i])]
            for s in multi:
                fim, est = s.get("fim") or {}, s.get("estimates") or {}
                alpha = fim.get("alpha")
                var = est.get("var_p_pu")
                row += [_fmt(alpha[i]) if alpha else "", _fmt(est["p_bar"][i]) if est else "",
                        _fmt(est["avg_rel_error_pct"][i]) if est else "",
                        _fmt(var[i]) if var else ""]
            w.writerow(row)
        w.writerow(["average_v_e", "", ""] + sum(
            ([_fmt(_v_e(s)), "", "", ""] for s in multi), []))
        w.writerow(["average_var_p_pu", "", ""] + sum(
            (["", "", "", _fmt(float(np.mean(s["estimates"]["var_p_pu"])))
              if s.get("estimates") and s["estimates"]["var_p_defined"] else ""]
             for s in multi), []))
    put("table_multi.csv", buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["channel", "parameters", "trial", "values"])
    for s in report.studies:
        est = s.get("estimates")
        if not est:
            continue
        for t, vals in zip(est["trials"], est["values"]):
            w.writerow([s["channel"], " ".join(s["parameters"]), t,
                        " ".join(_fmt(v) for v in vals)])
    put("trials.csv", buf.getvalue())

    for name in sorted(report.artifacts):
        put(name, report.artifacts[name])
    return written
