"""Simulation oracles: callables mapping a ParameterVector to a model-output Trace.

The FIM and the estimator only ever see this interface, so the power-system
simulator and closed-form toy models are interchangeable.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Mapping

import numpy as np

from .dynsim import ChannelSpec, Scenario, SimResult, Trace, run
from .model import OperatingPoint, SystemModel, init_load_flow
from .params import ParameterVector


class SimOracle:
    """Runs the simulator for a parameter vector and returns one channel.

    Parameters not in the vector are taken from ``fixed`` (then from the model).
    Results are cached by parameter values; views created with
    :meth:`with_channel` share the cache, so asking for a second channel at the
    same point costs nothing.
    """

    def __init__(self, model: SystemModel, scenario: Scenario, channel: ChannelSpec | str,
                 fixed: Mapping[str, float] | None = None, op: OperatingPoint | None = None,
                 cache_size: int = 64, _cache: OrderedDict | None = None):
        self.model = model
        self.scenario = scenario
        self.channel = ChannelSpec.parse(channel) if isinstance(channel, str) else channel
        self.channel.check(model)
        self.fixed = dict(fixed or {})
        self.op = op if op is not None else init_load_flow(model.with_overrides(self.fixed))
        self.cache_size = cache_size
        self._cache = _cache if _cache is not None else OrderedDict()
        self.calls = 0

    def with_channel(self, channel: ChannelSpec | str) -> "SimOracle":
        return SimOracle(self.model, self.scenario, channel, self.fixed, self.op,
                         self.cache_size, self._cache)

    def _key(self, p: ParameterVector):
        vals = {**self.fixed, **p.as_dict()}
        return tuple(sorted((k, float(v)) for k, v in vals.items()))

    def result(self, p: ParameterVector) -> SimResult:
        key = self._key(p)
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        self.calls += 1
        res = run(self.model, self.op, dict(key), self.scenario)
        self._cache[key] = res
        while len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return res

    def __call__(self, p: ParameterVector) -> Trace:
        return self.result(p).trace(self.channel)


class FunctionOracle:
    """Wraps ``fn(values) -> samples`` on a uniform grid (toy and test models)."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], n: int, dt: float = 1.0,
                 t0: float = 0.0, channel: ChannelSpec | str = "toy.omega_m"):
        self.fn = fn
        self.n = n
        self.dt = dt
        self.t0 = t0
        self.channel = ChannelSpec.parse(channel) if isinstance(channel, str) else channel
        self.calls = 0

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n)

    def __call__(self, p: ParameterVector) -> Trace:
        self.calls += 1
        y = np.asarray(self.fn(p.values), dtype=float)
        return Trace(self.channel, self.t0, self.dt, y)
