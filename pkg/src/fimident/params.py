"""Bounded parameter vectors addressed by dotted paths such as ``SM1.gov.K_t``."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import BoundsViolation, ConfigError


@dataclass(frozen=True)
class ParamEntry:
    path: str
    value: float
    unit: str = "pu"
    lower: float = -np.inf
    upper: float = np.inf
    alpha: float = 0.01
    # per-unit base used when reporting variances
    base: float | None = None

    def __post_init__(self):
        if not self.lower <= self.value <= self.upper:
            raise BoundsViolation(
                f"{self.path}={self.value} outside [{self.lower}, {self.upper}]"
            )
        if not self.alpha > 0:
            raise ConfigError(f"{self.path}: alpha must be > 0")
        if self.base is not None and self.base == 0:
            raise ConfigError(f"{self.path}: per-unit base must be non-zero")

    @property
    def pu_base(self) -> float:
        return abs(self.base) if self.base is not None else abs(self.value)


@dataclass(frozen=True)
class ParameterVector:
    entries: tuple[ParamEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ConfigError(f"duplicate parameter paths in {paths}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.entries[self.index(key)]
        return self.entries[key]

    @property
    def paths(self) -> list[str]:
        return [e.path for e in self.entries]

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.entries], dtype=float)

    @property
    def lower(self) -> np.ndarray:
        return np.array([e.lower for e in self.entries], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([e.upper for e in self.entries], dtype=float)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([e.alpha for e in self.entries], dtype=float)

    @property
    def bases(self) -> np.ndarray:
        return np.array([e.pu_base for e in self.entries], dtype=float)

    def index(self, path: str) -> int:
        for i, e in enumerate(self.entries):
            if e.path == path:
                return i
        raise KeyError(path)

    def as_dict(self) -> dict[str, float]:
        return {e.path: e.value for e in self.entries}

    def with_values(self, values: Sequence[float]) -> "ParameterVector":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(self),):
            raise ValueError(f"expected {len(self)} values, got shape {values.shape}")
        return ParameterVector(
            tuple(replace(e, value=float(v)) for e, v in zip(self.entries, values))
        )

    def with_value(self, path: str, value: float) -> "ParameterVector":
        vals = self.values
        vals[self.index(path)] = value
        return self.with_values(vals)

    def with_alphas(self, alphas: Sequence[float]) -> "ParameterVector":
        return ParameterVector(
            tuple(replace(e, alpha=float(a)) for e, a in zip(self.entries, alphas))
        )

    def subset(self, paths: Iterable[str]) -> "ParameterVector":
        return ParameterVector(tuple(self[p] for p in paths))

    def in_bounds(self, values: Sequence[float] | None = None) -> bool:
        v = self.values if values is None else np.asarray(values, dtype=float)
        return bool(np.all(v >= self.lower) and np.all(v <= self.upper))

    def to_json(self) -> list[dict]:
        out = []
        for e in self.entries:
            out.append({
                "path": e.path, "value": e.value, "unit": e.unit,
                "lower": _finite_or_none(e.lower), "upper": _finite_or_none(e.upper),
                "alpha": e.alpha, "base": e.base,
            })
        return out

    @classmethod
    def from_json(cls, items: list[dict]) -> "ParameterVector":
        entries = []
        for d in items:
            entries.append(ParamEntry(
                path=d["path"], value=float(d["value"]), unit=d.get("unit", "pu"),
                lower=_none_to(d.get("lower"), -np.inf),
                upper=_none_to(d.get("upper"), np.inf),
                alpha=float(d.get("alpha", 0.01)), base=d.get("base"),
            ))
        return cls(tuple(entries))


def _finite_or_none(x):
    return float(x) if np.isfinite(x) else None


def _none_to(x, default):
    return default if x is None else float(x)
