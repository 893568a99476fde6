"""Fixed-step RMS-phasor simulation of the study system.

Machines use the two-axis model with an algebraic stator; the network is
Kron-reduced to machine terminals with constant-impedance loads. Machine states
advance with RK4 (or implicit trapezoid) while controller outputs are held over
the step; governors and AVRs then advance with the trapezoidal rule on the
step-averaged input.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernel as K
from .errors import ConfigError, NumericalInstability, SingularNetwork
from .model import (AvrSEXS, GovernorIEEEG3, OperatingPoint, SystemModel, build_ybus,
                    init_load_flow, with_setpoints)
from .params import ParameterVector

QUANTITIES = {
    "omega_m": "rad/s",
    "omega_e": "rad/s",
    "P_e": "MW",
    "V_rms": "pu",
    "E_fd": "pu",
    "P_m": "pu",
    "T_m": "pu",
    "T_e": "pu",
    "delta": "rad",
}
_REINIT_SAFE = {"H", "D"}


@dataclass(frozen=True)
class ChannelSpec:
    """A recorded quantity on a machine (``SM1``) or, for ``V_rms``, a bus (``bus6``)."""

    element: str
    quantity: str

    def __post_init__(self):
        if self.quantity not in QUANTITIES:
            raise ConfigError(f"unknown quantity {self.quantity!r}")
        if self.element.startswith("bus") and self.quantity != "V_rms":
            raise ConfigError("bus channels only support V_rms")

    @property
    def unit(self) -> str:
        return QUANTITIES[self.quantity]

    @property
    def label(self) -> str:
        return f"{self.element}.{self.quantity}"

    @classmethod
    def parse(cls, text: str) -> "ChannelSpec":
        element, _, quantity = text.partition(".")
        if not quantity:
            raise ConfigError(f"channel must look like 'SM1.omega_m', got {text!r}")
        return cls(element, quantity)

    def check(self, model: SystemModel) -> None:
        if self.element.startswith("bus"):
            try:
                model.bus_index(int(self.element[3:]))
            except ValueError as exc:
                raise ConfigError(f"bad bus channel {self.element!r}") from exc
        else:
            model.machine_index(self.element)


@dataclass(frozen=True)
class Event:
    time: float
    action: str
    target: str
    quantity: str | None = None
    value: float | None = None

    def __post_init__(self):
        if self.action not in ("energize_load", "trip_load", "set_reference"):
            raise ConfigError(f"unknown event action {self.action!r}")
        if self.action == "set_reference" and self.quantity not in ("P_ref", "V_ref"):
            raise ConfigError("set_reference needs quantity P_ref or V_ref")


@dataclass(frozen=True)
class Scenario:
    t_end: float = 20.0
    dt: float = 1e-3
    events: tuple[Event, ...] = ()
    recorded_channels: tuple[ChannelSpec, ...] = ()
    method: str = "rk4"
    freeze_controls: bool = False

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(sorted(self.events, key=lambda e: e.time)))
        object.__setattr__(self, "recorded_channels", tuple(self.recorded_channels))
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if not self.t_end >= self.dt:
            raise ConfigError("t_end must be >= dt")
        for ev in self.events:
            if not 0 <= ev.time <= self.t_end:
                raise ConfigError(f"event time {ev.time} outside [0, {self.t_end}]")
        if self.method not in ("rk4", "trapezoid"):
            raise ConfigError(f"unknown integration method {self.method!r}")

    @property
    def n_steps(self) -> int:
        return int(np.floor(self.t_end / self.dt + 1e-9))

    def to_json(self) -> dict:
        return {
            "t_end": self.t_end, "dt": self.dt, "method": self.method,
            "freeze_controls": self.freeze_controls,
            "events": [vars(e).copy() for e in self.events],
            "recorded_channels": [c.label for c in self.recorded_channels],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scenario":
        try:
            return cls(
                t_end=float(d.get("t_end", 20.0)), dt=float(d.get("dt", 1e-3)),
                events=tuple(Event(**e) for e in d.get("events", ())),
                recorded_channels=tuple(ChannelSpec.parse(c) for c in d.get("recorded_channels", ())),
                method=d.get("method", "rk4"),
                freeze_controls=bool(d.get("freeze_controls", False)),
            )
        except TypeError as exc:
            raise ConfigError(f"malformed scenario: {exc}") from exc


def load_energization_scenario(model: SystemModel, t_end: float = 20.0, dt: float = 1e-3,
                               channels: Sequence[ChannelSpec] = (), method: str = "rk4") -> Scenario:
    """Scenario that energizes every switched load block at its ``energize_time``."""
    events = tuple(
        Event(ld.energize_time, "energize_load", ld.name or str(j))
        for j, ld in enumerate(model.loads) if ld.switched
    )
    return Scenario(t_end, dt, events, tuple(channels), method)


@dataclass(frozen=True)
class Trace:
    channel: ChannelSpec
    t0: float
    dt: float
    samples: np.ndarray

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        if not np.all(np.isfinite(s)):
            raise NumericalInstability(f"{self.channel.label}: non-finite samples")

    @property
    def unit(self) -> str:
        return self.channel.unit

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.samples))

    def __len__(self):
        return len(self.samples)

    def same_grid(self, other: "Trace") -> bool:
        return (len(self) == len(other) and np.isclose(self.t0, other.t0)
                and np.isclose(self.dt, other.dt))

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", f"{self.channel.label} [{self.unit}]"])
        for t, v in zip(self.t, self.samples):
            w.writerow([repr(float(t)), repr(float(v))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path) -> "Trace":
        rows = list(csv.reader(Path(path).read_text().splitlines()))
        label = rows[0][1].split(" [")[0]
        data = np.array([[float(a), float(b)] for a, b in rows[1:]])
        dt = float(data[1, 0] - data[0, 0]) if len(data) > 1 else 1.0
        return cls(ChannelSpec.parse(label), float(data[0, 0]), dt, data[:, 1])


# ---------------------------------------------------------------------------
# controller blocks as standalone steps


@dataclass(frozen=True)
class GovernorState:
    v: float
    g: float
    w: float
    xt: float
    u: float

    @classmethod
    def equilibrium(cls, gov: GovernorIEEEG3, p_m: float) -> "GovernorState":
        g = p_m / gov.K_t
        return cls(0.0, g, g, g, gov.sigma * g)


@dataclass(frozen=True)
class AvrState:
    x: float
    e_fd: float
    e: float

    @classmethod
    def equilibrium(cls, avr: AvrSEXS, e_fd: float) -> "AvrState":
        e = e_fd / avr.K
        return cls(e, e_fd, e)


def _gov_row(gov: GovernorIEEEG3 | None) -> np.ndarray:
    row = np.zeros(14)
    if gov is None:
        return row
    row[:] = [1.0, gov.K_g, gov.T_p, gov.sigma, gov.delta, gov.T_r, gov.K_t, gov.T_n,
              gov.T_d, gov.g_min, gov.g_max, gov.gdot_min, gov.gdot_max, gov.P_ref]
    return row


def _avr_row(avr: AvrSEXS | None) -> np.ndarray:
    row = np.zeros(8)
    if avr is None:
        return row
    row[:] = [1.0, avr.T_a, avr.T_b, avr.K, avr.T_e, avr.E_min, avr.E_max, avr.V_ref]
    return row


def governor_step(state: GovernorState, d_omega: float, params: GovernorIEEEG3,
                  dt: float) -> tuple[GovernorState, float]:
    """Advance the governor one step for speed deviation ``d_omega`` (p.u.).

    Under-frequency (negative ``d_omega``) opens the gate.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    M1, M2 = K.governor_matrices(params, dt)
    gs = np.array([state.v, state.g, state.w, state.xt, state.u])
    K.governor_advance(gs, params.P_ref - d_omega, _gov_row(params), M1, M2, dt)
    new = GovernorState(*map(float, gs))
    return new, float(K.governor_output(gs, _gov_row(params)))


def avr_step(state: AvrState, v_rms: float, params: AvrSEXS, dt: float) -> tuple[AvrState, float]:
    """Advance the SEXS exciter one step for terminal voltage ``v_rms`` (p.u.)."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    avs = np.array([state.x, state.e_fd, state.e])
    K.avr_advance(avs, params.V_ref - v_rms, _avr_row(params), dt)
    return AvrState(*map(float, avs)), float(avs[1])


def network_solve(G: np.ndarray, injections: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Bus voltages ``v`` with ``G @ v == injections``."""
    G = np.asarray(G)
    i = np.asarray(injections)
    if G.ndim != 2 or G.shape[0] != G.shape[1] or G.shape[0] != i.shape[0]:
        raise ValueError("admittance matrix must be square and match the injections")
    if np.any(np.all(G == 0, axis=1)) or np.any(np.all(G == 0, axis=0)):
        raise SingularNetwork("admittance matrix has an all-zero row or column")
    try:
        v = np.linalg.solve(G, i)
    except np.linalg.LinAlgError as exc:
        raise SingularNetwork(str(exc)) from exc
    scale = max(np.max(np.abs(i), initial=0.0), 1.0)
    if not np.all(np.isfinite(v)) or np.max(np.abs(G @ v - i), initial=0.0) > tol * scale:
        raise SingularNetwork("admittance matrix is numerically singular")
    return v


# ---------------------------------------------------------------------------
# simulation


def kron_reduce(Y: np.ndarray, keep: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Reduce ``Y`` onto ``keep`` buses; also return the map from kept-bus
    voltages to all bus voltages."""
    n = Y.shape[0]
    keep = list(keep)
    other = [b for b in range(n) if b not in keep]
    Ygg = Y[np.ix_(keep, keep)]
    recover = np.zeros((n, len(keep)), dtype=complex)
    recover[keep, np.arange(len(keep))] = 1.0
    if not other:
        return Ygg, recover
    Yoo = Y[np.ix_(other, other)]
    Yog = Y[np.ix_(other, keep)]
    if np.linalg.cond(Yoo) > 1e12:
        raise SingularNetwork("network partition is not factorizable (isolated bus?)")
    X = np.linalg.solve(Yoo, Yog)
    recover[other, :] = -X
    return Ygg - Y[np.ix_(keep, other)] @ X, recover


def _real_form(Y: np.ndarray) -> np.ndarray:
    n = Y.shape[0]
    R = np.zeros((2 * n, 2 * n))
    R[0::2, 0::2] = Y.real
    R[0::2, 1::2] = -Y.imag
    R[1::2, 0::2] = Y.imag
    R[1::2, 1::2] = Y.real
    return R


@dataclass
class SimResult:
    """Raw recorded machine quantities plus the map to bus voltages."""

    model: SystemModel
    dt: float
    rec: np.ndarray                       # (rows, machines, N_REC)
    segments: list = field(default_factory=list)  # (row_start, row_end, recover)

    @property
    def n_samples(self) -> int:
        return self.rec.shape[0]

    def channel(self, ch: ChannelSpec) -> np.ndarray:
        m = self.model
        q = ch.quantity
        if ch.element.startswith("bus"):
            b = m.bus_index(int(ch.element[3:]))
            vg = self.rec[:, :, K.REC_VRE] + 1j * self.rec[:, :, K.REC_VIM]
            out = np.empty(self.n_samples)
            for r0, r1, recover in self.segments:
                out[r0:r1] = np.abs(vg[r0:r1] @ recover[b])
            return out
        k = m.machine_index(ch.element)
        mu = m.machines[k]
        r = self.rec[:, k, :]
        om = r[:, K.REC_OMEGA]
        if q in ("omega_m", "omega_e"):
            w_m = om * (2.0 * np.pi * m.base_freq) * 2.0 / mu.pole_count
            return w_m if q == "omega_m" else 0.5 * mu.pole_count * w_m
        if q == "P_e":
            return (r[:, K.REC_VRE] * r[:, K.REC_IRE] + r[:, K.REC_VIM] * r[:, K.REC_IIM]) * m.base_mva
        if q == "V_rms":
            return np.hypot(r[:, K.REC_VRE], r[:, K.REC_VIM])
        if q == "E_fd":
            return r[:, K.REC_EFD].copy()
        if q == "P_m":
            return r[:, K.REC_PM].copy()
        if q == "T_m":
            return r[:, K.REC_PM] / om
        if q == "T_e":
            return r[:, K.REC_PAG] * m.base_mva / mu.s_rated / om
        if q == "delta":
            return r[:, K.REC_DELTA].copy()
        raise ConfigError(f"unsupported quantity {q!r}")

    def trace(self, ch: ChannelSpec) -> Trace:
        return Trace(ch, 0.0, self.dt, self.channel(ch))


def _machine_array(model: SystemModel) -> np.ndarray:
    mp = np.zeros((len(model.machines), 11))
    for k, m in enumerate(model.machines):
        zb = m.s_rated / model.base_mva
        mp[k] = [m.R_a / zb, m.X_d / zb, m.X_dp / zb, m.X_q / zb, m.X_qp / zb,
                 m.T_d0p, m.T_q0p, m.H, m.D, zb, 2.0 * np.pi * model.base_freq]
    return mp


def _network_for(model: SystemModel, op: OperatingPoint, energized: frozenset):
    Y = build_ybus(model)
    for j, ld in enumerate(model.loads):
        if j in energized:
            b = model.bus_index(ld.bus)
            Y[b, b] += op.load_admittance[j]
    keep = [model.bus_index(m.bus) for m in model.machines]
    Yred, recover = kron_reduce(Y, keep)
    return _real_form(Yred), recover


def _load_index(model: SystemModel, target: str) -> int:
    for j, ld in enumerate(model.loads):
        if ld.name == target:
            return j
    try:
        j = int(target)
    except ValueError:
        raise ConfigError(f"unknown load {target!r}") from None
    if not 0 <= j < len(model.loads):
        raise ConfigError(f"load index {j} out of range")
    return j


def prepare(model: SystemModel, op: OperatingPoint | None,
            overrides: ParameterVector | dict | None) -> tuple[SystemModel, OperatingPoint]:
    """Apply parameter overrides and recompute controller setpoints."""
    values = overrides.as_dict() if isinstance(overrides, ParameterVector) else dict(overrides or {})
    if values:
        model = model.with_overrides(values)
    reinit = op is None or any(
        len(p.split(".")) == 2 and p.split(".")[1] not in _REINIT_SAFE for p in values
    )
    if reinit:
        op = init_load_flow(model)
    return with_setpoints(model, op), op


def run(model: SystemModel, op: OperatingPoint | None, overrides, scenario: Scenario) -> SimResult:
    model, op = prepare(model, op, overrides)
    n = len(model.machines)
    h = scenario.dt
    nsteps = scenario.n_steps
    mp = _machine_array(model)
    x = np.column_stack([op.delta, np.ones(n), op.eqp, op.edp]).astype(float)
    pm = op.p_mss.astype(float).copy()
    efd = op.efd_ss.astype(float).copy()
    gp = np.array([_gov_row(m.governor) for m in model.machines])
    ap = np.array([_avr_row(m.avr) for m in model.machines])
    gM1 = np.zeros((n, 3, 3))
    gM2 = np.zeros((n, 3))
    gs = np.zeros((n, 5))
    avs = np.zeros((n, 3))
    for k, m in enumerate(model.machines):
        if m.governor is not None:
            gM1[k], gM2[k] = K.governor_matrices(m.governor, h)
            st = GovernorState.equilibrium(m.governor, pm[k])
            gs[k] = [st.v, st.g, st.w, st.xt, st.u]
        if m.avr is not None:
            st = AvrState.equilibrium(m.avr, efd[k])
            avs[k] = [st.x, st.e_fd, st.e]

    energized = frozenset(j for j, ld in enumerate(model.loads) if not ld.switched)
    cache: dict = {}

    def net(state):
        if state not in cache:
            cache[state] = _network_for(model, op, state)
        return cache[state]

    out = np.zeros((nsteps + 1, n, K.N_REC))
    Yr, recover = net(energized)
    if K.record_initial(x, pm, efd, Yr, mp, out, 0) != K.STATUS_OK:
        raise SingularNetwork("initial network solve failed")

    method = 0 if scenario.method == "rk4" else 1
    segments = []
    row = seg_start = 0
    pending = list(scenario.events)
    while True:
        stop = min(nsteps, int(round(pending[0].time / h))) if pending else nsteps
        if stop > row:
            status = K.run_segment(x, gs, avs, pm, efd, Yr, mp, gp, gM1, gM2, ap,
                                   row, stop - row, h, method, scenario.freeze_controls, out)
            if status == K.STATUS_SINGULAR:
                raise SingularNetwork(f"network solve failed after t={row * h:.4g}s")
            if status == K.STATUS_NONFINITE:
                raise NumericalInstability(f"non-finite state before t={stop * h:.4g}s")
        segments.append((seg_start, stop + 1, recover))
        seg_start = stop + 1
        row = stop
        if row >= nsteps:
            break
        while pending and int(round(pending[0].time / h)) <= row:
            ev = pending.pop(0)
            if ev.action == "energize_load":
                energized = energized | {_load_index(model, ev.target)}
            elif ev.action == "trip_load":
                energized = energized - {_load_index(model, ev.target)}
            else:
                k = model.machine_index(ev.target)
                if ev.quantity == "P_ref":
                    gp[k, K.GP_PREF] = ev.value
                else:
                    ap[k, K.AP_VREF] = ev.value
        Yr, recover = net(energized)
    if not np.all(np.isfinite(out)):
        raise NumericalInstability("non-finite recorded values")
    return SimResult(model, h, out, segments)


def simulate(model: SystemModel, op: OperatingPoint | None, overrides, scenario: Scenario,
             channels: Sequence[ChannelSpec] | None = None) -> list[Trace]:
    """Simulate ``scenario`` and return one :class:`Trace` per recorded channel."""
    chans = list(channels if channels is not None else scenario.recorded_channels)
    for ch in chans:
        ch.check(model)
    res = run(model, op, overrides, scenario)
    return [res.trace(ch) for ch in chans]


def equilibrium_residual(model: SystemModel, op: OperatingPoint) -> float:
    """Infinity norm of all state derivatives at ``op`` with setpoints applied."""
    model = with_setpoints(model, op)
    n = len(model.machines)
    mp = _machine_array(model)
    x = np.column_stack([op.delta, np.ones(n), op.eqp, op.edp]).astype(float)
    energized = frozenset(j for j, ld in enumerate(model.loads) if not ld.switched)
    Yr, _ = _network_for(model, op, energized)
    res = K.derivative_norm(x, op.p_mss.copy(), op.efd_ss.copy(), Yr, mp)
    for k, m in enumerate(model.machines):
        if m.governor is not None:
            g = m.governor
            st = GovernorState.equilibrium(g, op.p_mss[k])
            u = g.P_ref
            dv = (g.K_g * (u - g.sigma * st.g - g.delta * (st.g - st.w)) - st.v) / g.T_p
            res = max(res, abs(dv), abs(st.v), abs(st.g - st.w) / g.T_r,
                      abs(st.g - st.xt) / g.T_d)
        if m.avr is not None:
            a = m.avr
            st = AvrState.equilibrium(a, op.efd_ss[k])
            e = a.V_ref - op.v0_rms[k]
            r = a.T_a / a.T_b
            y = r * e + (1 - r) * st.x
            res = max(res, abs(e - st.x) / a.T_b, abs(a.K * y - st.e_fd) / a.T_e)
    return float(res)


def inertia_constant_si(model: SystemModel, machine: int) -> float:
    """Moment of inertia J (kg m^2) implied by H on the machine base."""
    m = model.machines[machine]
    w_m = 2.0 * np.pi * model.base_freq * 2.0 / m.pole_count
    return 2.0 * m.H * m.s_rated * 1e6 / w_m**2
