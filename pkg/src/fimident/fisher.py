"""Numerical Fisher information from perturbed simulations.

The score for parameter k is approximated by the change in squared error when
p_k is scaled by (1 + alpha_k). Averaging outer products of score vectors over
noise realizations gives the numerical FIM (nFIM); its inverse diagonal gives
numerical Cramer-Rao bounds and its eigenvalues the confidence-ellipsoid volume.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .dynsim import Trace
from .errors import (GridMismatch, NoFeasibleAlpha, NumericalInstability, SingularNetwork,
                     ZeroPerturbation)
from .measure import MeasurementSet, synthesize
from .params import ParamEntry, ParameterVector

__all__ = [
    "ALPHA_GRID", "FimReport", "ParameterVector", "build_nfim", "calibrate_alpha",
    "ellipsoid_volume", "empirical_nfim", "ncrlb", "nfim_at_estimates", "perturbed",
    "rank_of", "score", "summarize_nfim",
]

ALPHA_GRID = np.geomspace(1e-3, 1.0, 50)
RANK_RTOL = 1e-12

Oracle = Callable[[ParameterVector], Trace]


def _samples(y: Trace | np.ndarray) -> np.ndarray:
    return y.samples if isinstance(y, Trace) else np.asarray(y, dtype=float)


def score(z: MeasurementSet, y_base: Trace | np.ndarray, y_pert: Trace | np.ndarray,
          alpha_k: float, p_k: float) -> float:
    """Finite-difference score of the Gaussian log-likelihood w.r.t. p_k."""
    h = alpha_k * p_k
    if h == 0:
        raise ZeroPerturbation("alpha_k * p_k is zero")
    yb, yp = _samples(y_base), _samples(y_pert)
    if not (yb.shape == yp.shape == z.z.shape):
        raise GridMismatch("measurement, base and perturbed traces must share a grid")
    # (z - yp)^2 - (z - yb)^2 factored to avoid cancellation between two large sums
    diff = float((yb - yp) @ (2.0 * z.z - yp - yb))
    return diff / (2.0 * z.sigma_n ** 2 * h)


def build_nfim(scores: Sequence[float]) -> np.ndarray:
    s = np.atleast_1d(np.asarray(scores, dtype=float))
    return np.outer(s, s)


def rank_of(eigenvalues: np.ndarray, rtol: float = RANK_RTOL) -> int:
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size == 0 or lam.max() <= 0:
        return 0
    return int(np.sum(lam > rtol * lam.max()))


def ncrlb(nfim: np.ndarray) -> np.ndarray:
    """Per-parameter bounds: 1/I for a scalar, diag(I^-1) otherwise; +inf if singular."""
    F = np.atleast_2d(np.asarray(nfim, dtype=float))
    P = F.shape[0]
    if P == 1:
        return np.array([1.0 / F[0, 0] if F[0, 0] > 0 else np.inf])
    lam = np.linalg.eigvalsh(F)
    if rank_of(lam) < P:
        return np.full(P, np.inf)
    return np.diag(np.linalg.inv(F)).copy()


def ellipsoid_volume(eigenvalues: Sequence[float], rtol: float = RANK_RTOL) -> float:
    """Volume 2 pi^(P/2) / (P Gamma(P/2)) * prod(lambda_i^-1/2); +inf when rank deficient."""
    lam = np.atleast_1d(np.asarray(eigenvalues, dtype=float))
    P = lam.size
    if P == 0:
        raise ValueError("need at least one eigenvalue")
    if np.any(lam <= 0) or rank_of(lam, rtol) < P:
        return math.inf
    log_c = math.log(2.0) + 0.5 * P * math.log(math.pi) - math.log(P) - math.lgamma(0.5 * P)
    return math.exp(log_c - 0.5 * float(np.sum(np.log(lam))))


def perturbed(p: ParameterVector, k: int, alpha: float) -> ParameterVector:
    """``p`` with entry k scaled by (1 + alpha); bounds are dropped for the probe."""
    e = p.entries[k]
    new = ParamEntry(e.path, e.value * (1.0 + alpha), e.unit, alpha=e.alpha, base=e.base)
    entries = list(p.entries)
    entries[k] = new
    return ParameterVector(tuple(entries))


def calibrate_alpha(oracle: Oracle, p: ParameterVector, k: int | str, sigma_n: float,
                    C: float = 1.05, grid: Sequence[float] = ALPHA_GRID,
                    y_base: Trace | None = None) -> tuple[float, float]:
    """Smallest grid alpha whose difference curve has std above ``C * sigma_n``.

    Returns ``(alpha, sigma_d)``. Grid points where the simulator fails are
    skipped. Raises NoFeasibleAlpha if no grid point qualifies.
    """
    if C < 1:
        raise ValueError("C must be >= 1")
    if isinstance(k, str):
        k = p.index(k)
    if p.values[k] == 0:
        raise ZeroPerturbation(f"{p.paths[k]} is zero; relative perturbation undefined")
    yb = _samples(y_base if y_base is not None else oracle(p))
    thr = C * sigma_n
    best = 0.0
    for a in grid:
        try:
            d = _samples(oracle(perturbed(p, k, float(a)))) - yb
        except (NumericalInstability, SingularNetwork):
            continue
        sd = float(np.std(d))
        best = max(best, sd)
        if sd > thr:
            return float(a), sd
    raise NoFeasibleAlpha(p.paths[k], best, thr)


@dataclass(frozen=True)
class FimReport:
    paths: tuple[str, ...]
    values: np.ndarray
    bases: np.ndarray
    nfim: np.ndarray
    eigenvalues: np.ndarray
    ncrlb: np.ndarray
    v_e: float
    sigma_d: np.ndarray
    alpha_used: np.ndarray
    realizations: int
    rank: int
    sigma_n: float
    mean_score: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def P(self) -> int:
        return len(self.paths)

    @property
    def full_rank(self) -> bool:
        return self.rank == self.P

    @property
    def ncrlb_pu(self) -> np.ndarray:
        return self.ncrlb / self.bases ** 2

    @property
    def v_e_pu(self) -> float:
        """Volume in per-unit parameter coordinates."""
        return self.v_e / float(np.prod(self.bases))

    @property
    def perturbation_abs(self) -> np.ndarray:
        return self.alpha_used * self.values

    def to_json(self) -> dict:
        return {
            "parameters": list(self.paths),
            "values": _flist(self.values),
            "pu_bases": _flist(self.bases),
            "nfim": [_flist(r) for r in self.nfim],
            "eigenvalues": _flist(self.eigenvalues),
            "ncrlb": _flist(self.ncrlb),
            "ncrlb_pu": _flist(self.ncrlb_pu),
            "v_e": _fnum(self.v_e),
            "v_e_pu": _fnum(self.v_e_pu),
            "rank": self.rank,
            "full_rank": self.full_rank,
            "sigma_d": _flist(self.sigma_d),
            "alpha": _flist(self.alpha_used),
            "perturbation_abs": _flist(self.perturbation_abs),
            "realizations": self.realizations,
            "sigma_n": self.sigma_n,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def _fnum(x: float):
    x = float(x)
    return x if math.isfinite(x) else ("inf" if x > 0 else ("-inf" if x < 0 else "nan"))


def _flist(a) -> list:
    return [_fnum(v) for v in np.ravel(a)]


def summarize_nfim(score_vectors: Iterable[Sequence[float]], p: ParameterVector,
                   alphas: Sequence[float], sigma_d: Sequence[float], sigma_n: float) -> FimReport:
    """Average outer products of score vectors (in the given order) into a FimReport."""
    P = len(p)
    acc = np.zeros((P, P))
    ssum = np.zeros(P)
    n = 0
    for s in score_vectors:
        s = np.asarray(s, dtype=float)
        acc += build_nfim(s)
        ssum += s
        n += 1
    if n == 0:
        raise ValueError("no score vectors to average")
    F = acc / n
    F = 0.5 * (F + F.T)
    lam = np.linalg.eigvalsh(F)
    return FimReport(
        paths=tuple(p.paths), values=p.values, bases=p.bases, nfim=F, eigenvalues=lam,
        ncrlb=ncrlb(F), v_e=ellipsoid_volume(lam), sigma_d=np.asarray(sigma_d, dtype=float),
        alpha_used=np.asarray(alphas, dtype=float), realizations=n, rank=rank_of(lam),
        sigma_n=float(sigma_n), mean_score=ssum / n,
    )


def _resolve_alphas(oracle, p, sigma_n, alphas, C, y_base):
    if alphas is None:
        pairs = [calibrate_alpha(oracle, p, k, sigma_n, C, y_base=y_base) for k in range(len(p))]
        return np.array([a for a, _ in pairs]), np.array([s for _, s in pairs])
    alphas = np.broadcast_to(np.asarray(alphas, dtype=float), (len(p),)).copy()
    yb = _samples(y_base)
    sd = np.array([np.std(_samples(oracle(perturbed(p, k, a))) - yb) for k, a in enumerate(alphas)])
    return alphas, sd


def empirical_nfim(oracle: Oracle, p: ParameterVector, sigma_n: float, seeds: Sequence[int],
                   alphas: Sequence[float] | float | None = None, C: float = 1.05,
                   truth: Trace | None = None) -> FimReport:
    """nFIM at ``p`` averaged over one noise realization per seed.

    Measurements are synthesized around ``truth`` (default: the model output at
    ``p``). Base and perturbed traces are simulated once and reused for all
    realizations. ``alphas=None`` calibrates each alpha against ``C * sigma_n``.
    """
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    yb = oracle(p)
    alphas, sd = _resolve_alphas(oracle, p, sigma_n, alphas, C, yb)
    ypert = [oracle(perturbed(p, k, a)) for k, a in enumerate(alphas)]
    src = truth if truth is not None else yb
    vals = p.values

    def scores():
        for seed in seeds:
            z = synthesize(src, sigma_n, int(seed))
            yield [score(z, yb, yp, a, v) for yp, a, v in zip(ypert, alphas, vals)]

    return summarize_nfim(scores(), p, alphas, sd, sigma_n)


def nfim_at_estimates(oracle: Oracle, estimates: Sequence[ParameterVector], sigma_n: float,
                      alphas: Sequence[float], seeds: Sequence[int] | None = None,
                      measurements: Sequence[MeasurementSet] | None = None,
                      sigma_d: Sequence[float] | None = None) -> FimReport:
    """nFIM averaged over trials, each scored at its own estimate p_hat_t.

    By default trial t draws a fresh realization ``y(p_hat_t) + eps`` from
    ``seeds[t]``, so each term samples the information at p_hat_t. Passing
    ``measurements`` instead reuses the data each estimate was fitted to; the
    noise part of the score then nearly vanishes (the fit residual is orthogonal
    to the sensitivities) and only the perturbation bias term survives.
    Reported values are the mean of the estimates.
    """
    if not estimates:
        raise ValueError("need at least one estimate")
    if measurements is None and (seeds is None or len(seeds) != len(estimates)):
        raise ValueError("need one seed per estimate")
    if measurements is not None and len(measurements) != len(estimates):
        raise ValueError("need one measurement set per estimate")
    alphas = np.asarray(alphas, dtype=float)

    def scores():
        for t, ph in enumerate(estimates):
            yb = oracle(ph)
            z = measurements[t] if measurements is not None else synthesize(yb, sigma_n, int(seeds[t]))
            yield [score(z, yb, oracle(perturbed(ph, k, a)), a, ph.values[k])
                   for k, a in enumerate(alphas)]

    mean_p = np.mean([e.values for e in estimates], axis=0)
    p_mean = ParameterVector(tuple(replace(e, value=float(v), lower=-np.inf, upper=np.inf)
                                   for e, v in zip(estimates[0].entries, mean_p)))
    sd = np.full(len(alphas), np.nan) if sigma_d is None else sigma_d
    return summarize_nfim(scores(), p_mean, alphas, sd, sigma_n)
