"""Artificial measurements: SNR-based noise sizing, Gaussian synthesis and the
likelihood / squared-error functionals used by the FIM and the estimator."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynsim import ChannelSpec, Trace
from .errors import ConfigError, GridMismatch, ZeroMean

# Documented generator: PCG64 seeded through SeedSequence, so a (seed, stream)
# pair reproduces the same draws on every platform.
RNG_ALGORITHM = "numpy PCG64 via SeedSequence(entropy=seed, spawn_key=stream)"


def make_rng(seed: int, stream: int | tuple[int, ...] = ()) -> np.random.Generator:
    key = (stream,) if isinstance(stream, int) else tuple(stream)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


@dataclass(frozen=True)
class MeasurementSet:
    """Noisy samples ``z = y + eps`` on the grid of the noiseless trace ``base``."""

    base: Trace
    z: np.ndarray
    sigma_n: float
    snr_db: float | None = None
    seed: int | None = None
    stream: tuple[int, ...] = ()

    def __post_init__(self):
        z = np.array(self.z, dtype=float)
        z.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "stream", tuple(self.stream))
        if z.shape != self.base.samples.shape:
            raise GridMismatch(f"z has {z.size} samples, base has {len(self.base)}")
        if not self.sigma_n > 0:
            raise ConfigError("sigma_n must be > 0")

    @property
    def channel(self) -> ChannelSpec:
        return self.base.channel

    @property
    def t(self) -> np.ndarray:
        return self.base.t

    def __len__(self):
        return self.z.size

    def as_trace(self) -> Trace:
        return Trace(self.base.channel, self.base.t0, self.base.dt, self.z)

    def metadata(self) -> dict:
        return {
            "channel": self.channel.label, "unit": self.channel.unit,
            "sigma_n": self.sigma_n, "snr_db": self.snr_db, "seed": self.seed,
            "stream": list(self.stream), "rng": RNG_ALGORITHM,
            "t0": self.base.t0, "dt": self.base.dt, "n": len(self),
        }

    def save(self, path: str | Path, base_path: str | Path | None = None) -> None:
        """Write ``t,z`` CSV plus a ``.json`` sidecar; optionally the noiseless base."""
        path = Path(path)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "z"])
        for t, v in zip(self.t, self.z):
            w.writerow([repr(float(t)), repr(float(v))])
        path.write_text(buf.getvalue())
        meta = self.metadata()
        if base_path is not None:
            self.base.to_csv(base_path)
            meta["base"] = str(Path(base_path).name)
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MeasurementSet":
        """Read a measurement CSV and its sidecar.

        Without a stored noiseless base (real measurements), ``base`` holds the
        measured samples themselves so that grid checks still work.
        """
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        rows = list(csv.reader(path.read_text().splitlines()))[1:]
        data = np.array([[float(a), float(b)] for a, b in rows])
        ch = ChannelSpec.parse(meta["channel"])
        t0 = float(data[0, 0])
        dt = float(meta.get("dt") or (data[1, 0] - data[0, 0]))
        if meta.get("base"):
            base = Trace.from_csv(path.parent / meta["base"])
        else:
            base = Trace(ch, t0, dt, data[:, 1])
        return cls(base, data[:, 1], float(meta["sigma_n"]), meta.get("snr_db"),
                   meta.get("seed"), tuple(meta.get("stream", ())))


def noise_sigma_from_snr(trace: Trace | np.ndarray, snr_db: float) -> float:
    """Noise standard deviation giving amplitude SNR ``snr_db`` w.r.t. the trace mean."""
    y = trace.samples if isinstance(trace, Trace) else np.asarray(trace, dtype=float)
    if y.size == 0:
        raise ConfigError("empty trace")
    m = abs(float(np.mean(y)))
    if m == 0.0:
        raise ZeroMean("signal mean is zero; SNR-based noise level undefined")
    return m / 10.0 ** (snr_db / 20.0)


def synthesize(trace: Trace, sigma_n: float, seed: int, stream: int | tuple[int, ...] = (),
               snr_db: float | None = None) -> MeasurementSet:
    if not sigma_n > 0:
        raise ConfigError("sigma_n must be > 0")
    rng = make_rng(seed, stream)
    eps = rng.standard_normal(len(trace)) * sigma_n
    key = (stream,) if isinstance(stream, int) else tuple(stream)
    return MeasurementSet(trace, trace.samples + eps, float(sigma_n), snr_db, int(seed), key)


def _residual(z: MeasurementSet, y: Trace | np.ndarray) -> np.ndarray:
    if isinstance(y, Trace):
        if not z.base.same_grid(y):
            raise GridMismatch(f"measurement grid ({len(z)} samples) differs from trace ({len(y)})")
        ys = y.samples
    else:
        ys = np.asarray(y, dtype=float)
        if ys.shape != z.z.shape:
            raise GridMismatch(f"measurement has {len(z)} samples, model output {ys.size}")
    return z.z - ys


def sse(z: MeasurementSet, y: Trace | np.ndarray) -> float:
    r = _residual(z, y)
    return float(r @ r)


def log_likelihood(z: MeasurementSet, y: Trace | np.ndarray) -> float:
    """Gaussian log-likelihood of ``z`` given model output ``y`` and known sigma_n."""
    r = _residual(z, y)
    s2 = z.sigma_n ** 2
    return float(-0.5 * r.size * np.log(2.0 * np.pi * s2) - (r @ r) / (2.0 * s2))
