"""Bounded Levenberg-Marquardt fitting against a black-box simulation oracle."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dynsim import Trace
from .errors import BoundsViolation, GridMismatch, NumericalInstability, SingularNetwork
from .measure import MeasurementSet
from .params import ParamEntry, ParameterVector

Oracle = Callable[[ParameterVector], Trace]

FUNCTION_TOL = "function_tol"
STEP_TOL = "step_tol"
MAX_ITER = "max_iter"


def _model_output(oracle: Oracle, z: MeasurementSet, p: ParameterVector) -> np.ndarray:
    y = oracle(p)
    ys = y.samples if isinstance(y, Trace) else np.asarray(y, dtype=float)
    if ys.shape != z.z.shape:
        raise GridMismatch(f"model output has {ys.size} samples, measurement {len(z)}")
    return ys


def residuals(oracle: Oracle, z: MeasurementSet, p: ParameterVector) -> np.ndarray:
    """r = z - y(p)."""
    if not p.in_bounds():
        raise BoundsViolation(f"parameters outside bounds: {p.as_dict()}")
    return z.z - _model_output(oracle, z, p)


def _unbounded(p: ParameterVector, values: np.ndarray) -> ParameterVector:
    return ParameterVector(tuple(
        ParamEntry(e.path, float(v), e.unit, alpha=e.alpha, base=e.base)
        for e, v in zip(p.entries, values)
    ))


def jacobian_fd(oracle: Oracle, z: MeasurementSet, p: ParameterVector,
                rel_steps: float | Sequence[float] = 1e-4, min_step: float = 1e-8,
                r0: np.ndarray | None = None) -> np.ndarray:
    """Forward-difference d r / d p (N x P).

    Column k uses step ``rel_steps[k] * |p_k|`` (at least ``min_step``), taken
    backwards when the forward point would leave the upper bound.
    """
    rel = np.broadcast_to(np.asarray(rel_steps, dtype=float), (len(p),))
    if np.any(rel <= 0):
        raise ValueError("rel_steps must be > 0")
    if r0 is None:
        r0 = residuals(oracle, z, p)
    x = p.values
    J = np.empty((r0.size, len(p)))
    for k in range(len(p)):
        h = max(rel[k] * abs(x[k]), min_step)
        if x[k] + h > p.upper[k]:
            h = -h
        xk = x.copy()
        xk[k] += h
        J[:, k] = (z.z - _model_output(oracle, z, _unbounded(p, xk)) - r0) / h
    return J


@dataclass
class EstimationResult:
    p_hat: ParameterVector
    sse_history: list[float]
    step_norms: list[float]
    iterations: int
    converged_by: str
    residual_final: float
    log: list[dict] = field(default_factory=list)
    n_evals: int = 0

    @property
    def converged(self) -> bool:
        return self.converged_by != MAX_ITER

    def to_json(self) -> dict:
        return {
            "p_hat": self.p_hat.to_json(),
            "sse_history": list(map(float, self.sse_history)),
            "step_norms": list(map(float, self.step_norms)),
            "iterations": self.iterations,
            "converged_by": self.converged_by,
            "residual_final": float(self.residual_final),
            "n_evals": self.n_evals,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def log_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "sse", "step_norm", "damping", "accepted"])
        for row in self.log:
            w.writerow([row["iter"], repr(row["sse"]), repr(row["step_norm"]),
                        repr(row["damping"]), int(row["accepted"])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def fit(oracle: Oracle, z: MeasurementSet, p0: ParameterVector, zeta: float = 1e-6,
        eta: float = 1e-6, max_iter: int = 50, rel_step: float = 1e-4,
        scale_floor: float = 1e-3, max_rejections: int = 12) -> EstimationResult:
    """Levenberg-Marquardt with projection onto the box bounds.

    Works in scaled coordinates q = D p with D_kk = 1 / max(|p0_k|, scale_floor).
    Stops when the relative SSE change of an accepted step is at most ``zeta``
    or the scaled step norm ||D dp|| is at most ``eta``; ``max_iter`` bounds the
    number of Jacobian evaluations.
    """
    if not (zeta > 0 and eta > 0):
        raise ValueError("zeta and eta must be > 0")
    if not p0.in_bounds():
        raise BoundsViolation(f"p0 outside bounds: {p0.as_dict()}")
    lo, hi = p0.lower, p0.upper
    D = 1.0 / np.maximum(np.abs(p0.values), scale_floor)
    p = p0
    evals = 1
    r = residuals(oracle, z, p)
    S = float(r @ r)
    hist, steps, log = [S], [], [dict(iter=0, sse=S, step_norm=0.0, damping=0.0, accepted=True)]
    mu = None
    reason = MAX_ITER
    it = 0
    while it < max_iter:
        it += 1
        if S == 0.0:
            reason = FUNCTION_TOL
            break
        J = jacobian_fd(oracle, z, p, rel_step, r0=r)
        evals += len(p)
        Jq = J / D
        A = Jq.T @ Jq
        g = Jq.T @ r
        if mu is None:
            mu = 1e-3 * np.trace(A) / len(p) or 1e-3
        done = False
        for _ in range(max_rejections + 1):
            dq = np.linalg.solve(A + mu * np.eye(len(p)), -g)
            x_new = np.clip(p.values + dq / D, lo, hi)
            dp = x_new - p.values
            step = float(np.linalg.norm(D * dp))
            try:
                p_new = p.with_values(x_new)
                r_new = residuals(oracle, z, p_new)
                S_new = float(r_new @ r_new)
                evals += 1
            except (NumericalInstability, SingularNetwork):
                S_new = np.inf
            accepted = S_new < S
            log.append(dict(iter=it, sse=S_new if accepted else S, step_norm=step,
                            damping=float(mu), accepted=accepted))
            if accepted:
                rel_change = abs(S - S_new) / S_new if S_new > 0 else 0.0
                p, r, S = p_new, r_new, S_new
                hist.append(S)
                steps.append(step)
                mu = max(mu / 10.0, 1e-300)
                if rel_change <= zeta:
                    reason, done = FUNCTION_TOL, True
                elif step <= eta:
                    reason, done = STEP_TOL, True
                break
            mu *= 10.0
            if step <= eta:
                # even the damped proposal is negligible: we are at a (bounded) minimum
                reason, done = STEP_TOL, True
                break
        else:
            reason, done = STEP_TOL, True
        if done:
            break
    return EstimationResult(p, hist, steps, it, reason, S, log, evals)
