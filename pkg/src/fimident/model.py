"""Study-system data model, the 9-bus preset, load-flow initialization and setpoints.

All machine electrical data are stored on the machine's own MVA base; conversion
to the system base happens in :func:`init_load_flow` and the simulator.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, NonConvergence, SingularNetwork


@dataclass(frozen=True)
class Bus:
    id: int
    name: str = ""
    base_kv: float = 230.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0


@dataclass(frozen=True)
class Transformer:
    from_bus: int
    to_bus: int
    x: float
    ratio: float = 1.0
    r: float = 0.0


@dataclass(frozen=True)
class LoadSpec:
    bus: int
    p_nom: float
    q_nom: float = 0.0
    energize_time: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.p_nom < 0:
            raise ConfigError(f"load {self.name or self.bus}: p_nom must be >= 0")
        if self.energize_time is not None and self.energize_time < 0:
            raise ConfigError(f"load {self.name or self.bus}: energize_time must be >= 0")

    @property
    def switched(self) -> bool:
        return self.energize_time is not None


@dataclass(frozen=True)
class GovernorIEEEG3:
    """Hydro governor: rate-limited gate servo and integrator, permanent and
    transient droop feedback, non-minimum-phase turbine."""

    K_g: float = 5.0
    T_p: float = 0.05
    sigma: float = 0.04
    delta: float = 0.8
    T_r: float = 5.0
    K_t: float = 1.5
    T_n: float = -1.7067
    T_d: float = 2.4
    g_min: float = 0.0
    g_max: float = 1.0
    gdot_min: float = -0.2
    gdot_max: float = 0.2
    P_ref: float = 0.0

    def __post_init__(self):
        for name in ("T_p", "T_r", "T_d", "sigma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"governor {name} must be > 0")
        if not self.g_min < self.g_max:
            raise ConfigError("governor g_min must be < g_max")
        if not self.gdot_min < 0 < self.gdot_max:
            raise ConfigError("governor rate limits must satisfy gdot_min < 0 < gdot_max")


@dataclass(frozen=True)
class AvrSEXS:
    T_a: float = 1.0
    T_b: float = 12.0
    K: float = 20.0
    T_e: float = 0.04
    E_min: float = -5.0
    E_max: float = 5.0
    V_ref: float = 0.0

    def __post_init__(self):
        if not (self.T_b > 0 and self.T_e > 0):
            raise ConfigError("AVR T_b and T_e must be > 0")
        if not self.K > 0:
            raise ConfigError("AVR gain K must be > 0")
        if not self.E_min < self.E_max:
            raise ConfigError("AVR E_min must be < E_max")


@dataclass(frozen=True)
class MachineUnit:
    """Two-axis synchronous machine. Reactances in p.u. and inertia H in s,
    both on the machine base ``s_rated``; damping D in p.u. torque per p.u. speed."""

    name: str
    bus: int
    s_rated: float
    v_rated: float
    p_gen: float
    v_set: float = 1.0
    pole_count: int = 2
    R_a: float = 0.0
    X_d: float = 1.0
    X_dp: float = 0.2
    X_q: float = 1.0
    X_qp: float = 0.2
    T_d0p: float = 6.0
    T_q0p: float = 0.5
    H: float = 3.0
    D: float = 0.0
    slack: bool = False
    governor: GovernorIEEEG3 | None = None
    avr: AvrSEXS | None = None

    def __post_init__(self):
        if not self.X_d >= self.X_dp > 0:
            raise ConfigError(f"{self.name}: need X_d >= X_dp > 0")
        if not self.X_q >= self.X_qp > 0:
            raise ConfigError(f"{self.name}: need X_q >= X_qp > 0")
        if not (self.T_d0p > 0 and self.T_q0p > 0):
            raise ConfigError(f"{self.name}: open-circuit time constants must be > 0")
        if not self.H > 0:
            raise ConfigError(f"{self.name}: H must be > 0")
        if self.pole_count < 2 or self.pole_count % 2:
            raise ConfigError(f"{self.name}: pole_count must be even and >= 2")
        if not self.s_rated > 0:
            raise ConfigError(f"{self.name}: s_rated must be > 0")


@dataclass(frozen=True)
class SystemModel:
    name: str
    base_mva: float
    base_freq: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...] = ()
    transformers: tuple[Transformer, ...] = ()
    loads: tuple[LoadSpec, ...] = ()
    machines: tuple[MachineUnit, ...] = ()

    def __post_init__(self):
        for name in ("buses", "branches", "transformers", "loads", "machines"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.base_mva > 0 or not self.base_freq > 0:
            raise ConfigError("base_mva and base_freq must be > 0")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate bus ids")
        known = set(ids)
        for el in (*self.branches, *self.transformers):
            if el.from_bus not in known or el.to_bus not in known:
                raise ConfigError(f"{el} references an unknown bus")
        for ld in self.loads:
            if ld.bus not in known:
                raise ConfigError(f"load on unknown bus {ld.bus}")
        if not self.machines:
            raise ConfigError("at least one machine is required")
        names = [m.name for m in self.machines]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate machine names")
        mbus = [m.bus for m in self.machines]
        if len(set(mbus)) != len(mbus):
            raise ConfigError("at most one machine per bus")
        for m in self.machines:
            if m.bus not in known:
                raise ConfigError(f"machine {m.name} on unknown bus {m.bus}")
        if sum(m.slack for m in self.machines) > 1:
            raise ConfigError("at most one slack machine")

    @property
    def slack_index(self) -> int:
        for i, m in enumerate(self.machines):
            if m.slack:
                return i
        return 0

    def bus_index(self, bus_id: int) -> int:
        for i, b in enumerate(self.buses):
            if b.id == bus_id:
                return i
        raise ConfigError(f"unknown bus {bus_id}")

    def machine_index(self, name: str) -> int:
        for i, m in enumerate(self.machines):
            if m.name == name:
                return i
        raise ConfigError(f"unknown machine {name!r}")

    def with_overrides(self, values: dict[str, float]) -> "SystemModel":
        """Return a copy with dotted-path parameters replaced.

        Paths are ``<machine>.<field>``, ``<machine>.gov.<field>`` or
        ``<machine>.avr.<field>``.
        """
        machines = list(self.machines)
        for path, value in values.items():
            parts = path.split(".")
            i = self.machine_index(parts[0])
            m = machines[i]
            try:
                if len(parts) == 2:
                    m = replace(m, **{parts[1]: value})
                elif len(parts) == 3 and parts[1] in ("gov", "avr"):
                    block = m.governor if parts[1] == "gov" else m.avr
                    if block is None:
                        raise ConfigError(f"{path}: machine has no {parts[1]}")
                    block = replace(block, **{parts[2]: value})
                    m = replace(m, **{"governor" if parts[1] == "gov" else "avr": block})
                else:
                    raise ConfigError(f"malformed parameter path {path!r}")
            except TypeError as exc:
                raise ConfigError(f"unknown parameter path {path!r}") from exc
            machines[i] = m
        return replace(self, machines=tuple(machines))

    def get_parameter(self, path: str) -> float:
        parts = path.split(".")
        m = self.machines[self.machine_index(parts[0])]
        if len(parts) == 2:
            return float(getattr(m, parts[1]))
        block = m.governor if parts[1] == "gov" else m.avr
        return float(getattr(block, parts[2]))


@dataclass
class OperatingPoint:
    """Load-flow solution plus the machine states that hold it in equilibrium.

    Machine quantities are indexed like ``model.machines``. Powers are on the
    system base unless suffixed ``_mach`` (machine base).
    """

    bus_ids: list[int]
    v_bus: np.ndarray            # complex bus voltages
    p_gen: np.ndarray            # terminal active power, system p.u.
    q_gen: np.ndarray
    v_term: np.ndarray           # complex terminal voltages
    i_term: np.ndarray           # complex machine currents (network frame, system base)
    delta: np.ndarray            # rotor angles (rad)
    eqp: np.ndarray
    edp: np.ndarray
    efd_ss: np.ndarray
    p_mss: np.ndarray            # steady-state mechanical power, machine p.u.
    load_admittance: np.ndarray  # per load, system p.u. (switched loads included)
    iterations: int = 0

    @property
    def v0_rms(self) -> np.ndarray:
        return np.abs(self.v_term)


# ---------------------------------------------------------------------------
# 9-bus preset


def ieee9_preset(energize_time: float = 1.0) -> SystemModel:
    """WSCC 3-machine 9-bus system; SM1 carries the IEEEG3 governor and SEXS AVR.

    Network and machine data follow the standard 100 MVA study case; L6 is split
    into a 75 MW base block and a switched 15 MW active-power block. SM2 and SM3
    run with constant mechanical power and field voltage plus a small damping
    D = 1 p.u., so SM1 alone regulates frequency and voltage. (Hydro governors on
    all three units leave the frequency mode with under 1 degree of phase margin,
    since constant-impedance loads add no frequency damping.)
    """
    buses = tuple(Bus(i, f"Bus {i}", kv) for i, kv in
                  [(1, 16.5), (2, 18.0), (3, 13.8), (4, 230.0), (5, 230.0),
                   (6, 230.0), (7, 230.0), (8, 230.0), (9, 230.0)])
    transformers = (
        Transformer(1, 4, 0.0576),
        Transformer(2, 7, 0.0625),
        Transformer(3, 9, 0.0586),
    )
    branches = (
        Branch(4, 5, 0.010, 0.085, 0.176),
        Branch(4, 6, 0.017, 0.092, 0.158),
        Branch(5, 7, 0.032, 0.161, 0.306),
        Branch(6, 9, 0.039, 0.170, 0.358),
        Branch(7, 8, 0.0085, 0.072, 0.149),
        Branch(8, 9, 0.0119, 0.1008, 0.209),
    )
    loads = (
        LoadSpec(5, 125.0, 50.0, name="L5"),
        LoadSpec(6, 75.0, 30.0, name="L6"),
        LoadSpec(6, 15.0, 0.0, energize_time=energize_time, name="L6_step"),
        LoadSpec(8, 100.0, 35.0, name="L8"),
    )
    gov = GovernorIEEEG3()
    avr = AvrSEXS()

    def unit(name, bus, s, kv, p, v, poles, xd, xdp, xq, xqp, td0, tq0, h_sys, slack=False,
             gov=gov, avr=avr, D=0.0):
        # source data on 100 MVA; stored on machine base
        k = s / 100.0
        return MachineUnit(
            name=name, bus=bus, s_rated=s, v_rated=kv, p_gen=p, v_set=v,
            pole_count=poles, R_a=0.0, X_d=xd * k, X_dp=xdp * k, X_q=xq * k,
            X_qp=xqp * k, T_d0p=td0, T_q0p=tq0, H=h_sys / k, D=D, slack=slack,
            governor=gov, avr=avr,
        )

    machines = (
        unit("SM1", 1, 247.5, 16.5, 71.6, 1.040, 12, 0.1460, 0.0608, 0.0969, 0.0969,
             8.96, 0.310, 23.64, slack=True),
        unit("SM2", 2, 192.0, 18.0, 163.0, 1.025, 2, 0.8958, 0.1198, 0.8645, 0.1969,
             6.00, 0.535, 6.40, gov=None, avr=None, D=1.0),
        unit("SM3", 3, 128.0, 13.8, 85.0, 1.025, 2, 1.3125, 0.1813, 1.2578, 0.2500,
             5.89, 0.600, 3.01, gov=None, avr=None, D=1.0),
    )
    return SystemModel("ieee9", 100.0, 60.0, buses, branches, transformers, loads, machines)


# ---------------------------------------------------------------------------
# network matrices


def build_ybus(model: SystemModel) -> np.ndarray:
    """Nodal admittance matrix of lines and transformers (no loads, no machines)."""
    n = len(model.buses)
    Y = np.zeros((n, n), dtype=complex)
    for br in model.branches:
        i, j = model.bus_index(br.from_bus), model.bus_index(br.to_bus)
        y = 1.0 / complex(br.r, br.x)
        Y[i, i] += y + 0.5j * br.b
        Y[j, j] += y + 0.5j * br.b
        Y[i, j] -= y
        Y[j, i] -= y
    for tr in model.transformers:
        i, j = model.bus_index(tr.from_bus), model.bus_index(tr.to_bus)
        y = 1.0 / complex(tr.r, tr.x)
        a = tr.ratio
        Y[i, i] += y / a**2
        Y[j, j] += y
        Y[i, j] -= y / a
        Y[j, i] -= y / a
    return Y


def _power_flow(model: SystemModel, tol: float, max_iter: int):
    Y = build_ybus(model)
    n = len(model.buses)
    base = model.base_mva
    s_load = np.zeros(n, dtype=complex)
    for ld in model.loads:
        if not ld.switched:
            s_load[model.bus_index(ld.bus)] += complex(ld.p_nom, ld.q_nom) / base
    p_spec = -s_load.real.copy()
    q_spec = -s_load.imag.copy()
    vm = np.ones(n)
    va = np.zeros(n)
    slack = model.bus_index(model.machines[model.slack_index].bus)
    pv = []
    for k, m in enumerate(model.machines):
        b = model.bus_index(m.bus)
        vm[b] = m.v_set
        if k != model.slack_index:
            pv.append(b)
            p_spec[b] += m.p_gen / base
    pq = [b for b in range(n) if b != slack and b not in pv]
    pvpq = np.array(pv + pq, dtype=int)
    pq = np.array(pq, dtype=int)

    for it in range(max_iter + 1):
        V = vm * np.exp(1j * va)
        S = V * np.conj(Y @ V)
        mis = np.concatenate([S.real[pvpq] - p_spec[pvpq], S.imag[pq] - q_spec[pq]])
        if not np.all(np.isfinite(mis)):
            raise NonConvergence("power-flow mismatch became non-finite")
        if np.max(np.abs(mis), initial=0.0) < tol:
            return V, S, it
        if it == max_iter:
            break
        Ibus = Y @ V
        dS_dva = 1j * np.diag(V) @ np.conj(np.diag(Ibus) - Y @ np.diag(V))
        dS_dvm = np.diag(V) @ np.conj(Y @ np.diag(V / vm)) + np.diag(np.conj(Ibus) * V / vm)
        J = np.block([
            [dS_dva.real[np.ix_(pvpq, pvpq)], dS_dvm.real[np.ix_(pvpq, pq)]],
            [dS_dva.imag[np.ix_(pq, pvpq)], dS_dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(J, -mis)
        except np.linalg.LinAlgError as exc:
            raise SingularNetwork(f"power-flow Jacobian is singular: {exc}") from exc
        if not np.all(np.isfinite(dx)) or np.linalg.cond(J) > 1e14:
            raise SingularNetwork("power-flow Jacobian is numerically singular")
        va[pvpq] += dx[:len(pvpq)]
        vm[pq] += dx[len(pvpq):]
    raise NonConvergence(f"power flow did not converge in {max_iter} iterations")


def init_load_flow(model: SystemModel, tol: float = 1e-12, max_iter: int = 30) -> OperatingPoint:
    """Solve the AC power flow and back-solve machine states to equilibrium.

    Switched load blocks (``energize_time`` set) are excluded from the initial
    state; their admittance is sized at the pre-event bus voltage.
    """
    V, S, iters = _power_flow(model, tol, max_iter)
    base = model.base_mva
    n_m = len(model.machines)
    p_gen = np.zeros(n_m)
    q_gen = np.zeros(n_m)
    v_term = np.zeros(n_m, dtype=complex)
    i_term = np.zeros(n_m, dtype=complex)
    delta = np.zeros(n_m)
    eqp = np.zeros(n_m)
    edp = np.zeros(n_m)
    efd = np.zeros(n_m)
    p_mss = np.zeros(n_m)
    s_load = np.zeros(len(model.buses), dtype=complex)
    for ld in model.loads:
        if not ld.switched:
            s_load[model.bus_index(ld.bus)] += complex(ld.p_nom, ld.q_nom) / base
    for k, m in enumerate(model.machines):
        b = model.bus_index(m.bus)
        sg = S[b] + s_load[b]
        p_gen[k], q_gen[k] = sg.real, sg.imag
        v = V[b]
        i = np.conj(sg / v)
        zb = m.s_rated / base  # machine-to-system impedance scale is 1/zb
        ra, xd, xdp, xq, xqp = (m.R_a / zb, m.X_d / zb, m.X_dp / zb, m.X_q / zb, m.X_qp / zb)
        eq_phasor = v + complex(ra, xq) * i
        d = np.angle(eq_phasor)
        rot = np.exp(-1j * (d - np.pi / 2))
        vdq = v * rot
        idq = i * rot
        vd, vq, id_, iq = vdq.real, vdq.imag, idq.real, idq.imag
        edp[k] = (xq - xqp) * iq
        eqp[k] = vq + ra * iq + xdp * id_
        efd[k] = eqp[k] + (xd - xdp) * id_
        pag = (edp[k] * id_ + eqp[k] * iq + (xqp - xdp) * id_ * iq)
        p_mss[k] = pag / zb
        delta[k] = d
        v_term[k] = v
        i_term[k] = i
    y_load = np.zeros(len(model.loads), dtype=complex)
    for j, ld in enumerate(model.loads):
        vmag = abs(V[model.bus_index(ld.bus)])
        y_load[j] = complex(ld.p_nom, -ld.q_nom) / base / vmag**2
    return OperatingPoint(
        bus_ids=[b.id for b in model.buses], v_bus=V, p_gen=p_gen, q_gen=q_gen,
        v_term=v_term, i_term=i_term, delta=delta, eqp=eqp, edp=edp, efd_ss=efd,
        p_mss=p_mss, load_admittance=y_load, iterations=iters,
    )


def compute_setpoints(op: OperatingPoint, gov: GovernorIEEEG3 | None, avr: AvrSEXS | None,
                      machine: int = 0) -> tuple[float | None, float | None]:
    """Governor and AVR references that hold ``machine`` at the operating point."""
    p_ref = v_ref = None
    if gov is not None:
        if gov.K_t == 0:
            raise ZeroDivisionError("turbine gain K_t is zero")
        p_ref = gov.sigma / gov.K_t * float(op.p_mss[machine])
    if avr is not None:
        if avr.K == 0:
            raise ZeroDivisionError("exciter gain K is zero")
        v_ref = float(op.efd_ss[machine]) / avr.K + float(op.v0_rms[machine])
    return p_ref, v_ref


def with_setpoints(model: SystemModel, op: OperatingPoint) -> SystemModel:
    """Copy of ``model`` with every controller reference recomputed from ``op``."""
    machines = []
    for k, m in enumerate(model.machines):
        p_ref, v_ref = compute_setpoints(op, m.governor, m.avr, k)
        gov = replace(m.governor, P_ref=p_ref) if m.governor is not None else None
        avr = replace(m.avr, V_ref=v_ref) if m.avr is not None else None
        machines.append(replace(m, governor=gov, avr=avr))
    return replace(model, machines=tuple(machines))


# ---------------------------------------------------------------------------
# config round trip


def model_to_dict(model: SystemModel) -> dict[str, Any]:
    return asdict(model)


def model_from_dict(d: dict[str, Any]) -> SystemModel:
    def machine(md):
        md = dict(md)
        gov = md.pop("governor", None)
        avr = md.pop("avr", None)
        return MachineUnit(
            **md,
            governor=GovernorIEEEG3(**gov) if gov is not None else None,
            avr=AvrSEXS(**avr) if avr is not None else None,
        )

    try:
        return SystemModel(
            name=d.get("name", "custom"),
            base_mva=float(d["base_mva"]),
            base_freq=float(d["base_freq"]),
            buses=tuple(Bus(**b) for b in d["buses"]),
            branches=tuple(Branch(**b) for b in d.get("branches", ())),
            transformers=tuple(Transformer(**t) for t in d.get("transformers", ())),
            loads=tuple(LoadSpec(**ld) for ld in d.get("loads", ())),
            machines=tuple(machine(m) for m in d["machines"]),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed system config: {exc}") from exc


def save_model(model: SystemModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n")


def load_model(ref: str | Path) -> SystemModel:
    """Load a system by builtin name (``ieee9``) or from a JSON file."""
    if str(ref) == "ieee9":
        return ieee9_preset()
    try:
        data = json.loads(Path(ref).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read system config {ref}: {exc}") from exc
    return model_from_dict(data)


def models_close(a: SystemModel, b: SystemModel, rtol: float = 1e-12) -> bool:
    """Field-wise equality with a float tolerance."""
    return _close(model_to_dict(a), model_to_dict(b), rtol)


def _close(x, y, rtol):
    if isinstance(x, dict):
        return isinstance(y, dict) and x.keys() == y.keys() and all(_close(x[k], y[k], rtol) for k in x)
    if isinstance(x, (list, tuple)):
        return isinstance(y, (list, tuple)) and len(x) == len(y) and all(_close(a, b, rtol) for a, b in zip(x, y))
    if isinstance(x, float) or isinstance(y, float):
        if x is None or y is None:
            return x is y
        return math.isclose(x, y, rel_tol=rtol, abs_tol=1e-300)
    return x == y
