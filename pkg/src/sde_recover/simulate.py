"""Euler-Maruyama simulation of the process catalog and trajectory plumbing.

Random numbers come from NumPy's ``PCG64`` bit generator seeded with the
integer seed (``numpy.random.default_rng(seed)``); normal variates use
NumPy's ziggurat transform, which is platform independent.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

EXP_DECAY_VOL = "ExpDecayVol"
TRIGONOMETRIC = "Trigonometric"
GBM = "GBM"
OU = "OU"

PROCESS_PARAMS = {
    EXP_DECAY_VOL: ("mu", "b"),
    TRIGONOMETRIC: ("k_freq", "b"),
    GBM: ("mu", "sigma"),
    OU: ("theta", "sigma"),
}


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"state became non-finite at step {step}")
        self.step = step


class FactorTooLargeError(ValueError):
    pass


class TooShortError(ValueError):
    pass


@dataclass(frozen=True)
class ProcessSpec:
    """A catalog process.

    ============  =======================  =======================
    family        drift                    volatility
    ============  =======================  =======================
    ExpDecayVol   ``mu*x``                 ``b*exp(-x**2)``
    Trigonometric ``sin(2*k_freq*pi*x)``   ``b*cos(2*k_freq*pi*x)``
    GBM           ``mu*x``                 ``sigma*x``
    OU            ``-theta*x``             ``sigma``
    ============  =======================  =======================
    """

    family: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in PROCESS_PARAMS:
            raise ValueError(f"unknown process family {self.family!r}")
        names = PROCESS_PARAMS[self.family]
        params = dict(self.params)
        if self.family == TRIGONOMETRIC:
            params.setdefault("k_freq", 1.0)
        if set(params) != set(names):
            raise ValueError(f"{self.family} needs parameters {names}, got {tuple(params)}")
        object.__setattr__(self, "params", MappingProxyType({k: float(params[k]) for k in names}))

    @classmethod
    def exp_decay_vol(cls, mu, b):
        return cls(EXP_DECAY_VOL, {"mu": mu, "b": b})

    @classmethod
    def trigonometric(cls, b, k_freq=1.0):
        return cls(TRIGONOMETRIC, {"k_freq": k_freq, "b": b})

    @classmethod
    def gbm(cls, mu, sigma):
        return cls(GBM, {"mu": mu, "sigma": sigma})

    @classmethod
    def ou(cls, theta, sigma):
        return cls(OU, {"theta": theta, "sigma": sigma})

    def to_dict(self) -> dict:
        return {"family": self.family, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ProcessSpec":
        return cls(data["family"], dict(data.get("params", {})))

    def __hash__(self):
        return hash((self.family, tuple(self.params.items())))

    def __eq__(self, other):
        if not isinstance(other, ProcessSpec):
            return NotImplemented
        return self.family == other.family and dict(self.params) == dict(other.params)


def drift_of(process: ProcessSpec, x):
    x = np.asarray(x, dtype=float)
    p = process.params
    if process.family == EXP_DECAY_VOL:
        out = p["mu"] * x
    elif process.family == TRIGONOMETRIC:
        out = np.sin(2.0 * p["k_freq"] * np.pi * x)
    elif process.family == GBM:
        out = p["mu"] * x
    else:
        out = -p["theta"] * x
    return out[()] if out.ndim == 0 else out


def vol_of(process: ProcessSpec, x):
    x = np.asarray(x, dtype=float)
    p = process.params
    if process.family == EXP_DECAY_VOL:
        out = p["b"] * np.exp(-x * x)
    elif process.family == TRIGONOMETRIC:
        out = p["b"] * np.cos(2.0 * p["k_freq"] * np.pi * x)
    elif process.family == GBM:
        out = p["sigma"] * x
    else:
        out = np.full_like(x, p["sigma"])
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    values: np.ndarray  # (n,) or (n, d)
    seed: int | None = None
    process: ProcessSpec | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or v.shape[0] != t.shape[0]:
            raise ValueError("times and values must have the same length")
        if t.shape[0] < 2:
            raise TooShortError("a trajectory needs at least two samples")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.times.shape[0]

    @property
    def dim(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[1]


def euler_maruyama(process: ProcessSpec, x0: float, dt: float, n_steps: int,
                   seed: int) -> Trajectory:
    """Simulate ``n_steps`` Euler-Maruyama steps starting at ``x0`` at time 0."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(n_steps)
    sqdt = math.sqrt(dt)
    values = np.empty(n_steps + 1)
    values[0] = x = float(x0)
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(n_steps):
            x = x + float(drift_of(process, x)) * dt + float(vol_of(process, x)) * sqdt * xi[n]
            if not math.isfinite(x):
                raise NonFiniteStateError(n + 1)
            values[n + 1] = x
    return Trajectory(np.arange(n_steps + 1) * dt, values, seed=seed, process=process)


def stack_trajectories(trajectories: Sequence[Trajectory]) -> Trajectory:
    """Combine scalar trajectories sharing a time grid into one d-dimensional path."""
    t0 = trajectories[0].times
    for tr in trajectories[1:]:
        if not np.array_equal(tr.times, t0):
            raise ValueError("trajectories must share the same time grid")
    values = np.column_stack([tr.values for tr in trajectories])
    return Trajectory(t0, values, seed=trajectories[0].seed)


def subsample(traj: Trajectory, k: int) -> Trajectory:
    """Keep samples 0, k, 2k, ..."""
    if k < 1:
        raise ValueError("k must be a positive integer")
    if len(traj) <= k:
        raise FactorTooLargeError(f"trajectory of length {len(traj)} cannot be subsampled by {k}")
    if k == 1:
        return traj
    return Trajectory(traj.times[::k], traj.values[::k], seed=traj.seed, process=traj.process)


@dataclass(frozen=True)
class ObservationSet:
    """Training triples: states ``X``, increments ``Y`` leaving them, and time steps ``dt``."""

    X: np.ndarray  # (N,) or (N, d)
    Y: np.ndarray  # (N,) or (N, d)
    dt: np.ndarray  # (N,)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        dt = np.asarray(self.dt, dtype=float).ravel()
        if not (X.shape[0] == Y.shape[0] == dt.shape[0]):
            raise ValueError("X, Y and dt must have the same length")
        if np.any(dt <= 0):
            raise ValueError("all dt must be positive")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "dt", dt)

    def __len__(self):
        return self.dt.shape[0]

    def subset(self, idx) -> "ObservationSet":
        idx = np.asarray(idx)
        return ObservationSet(self.X[idx], self.Y[idx], self.dt[idx])

    def component(self, i: int) -> "ObservationSet":
        """Scalar-output observations for dimension ``i``; states keep full dimension."""
        return ObservationSet(self.X, self.Y[:, i], self.dt)


def to_observations(traj: Trajectory) -> ObservationSet:
    if len(traj) < 2:
        raise TooShortError("need at least two samples")
    v = traj.values
    return ObservationSet(v[:-1], v[1:] - v[:-1], np.diff(traj.times))


# --- files ------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def trajectory_to_csv(traj: Trajectory, path=None) -> str:
    """Write ``t,x`` (or ``t,x1..xd``) rows with round-trip precision."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if traj.values.ndim == 1:
        w.writerow(["t", "x"])
        for t, x in zip(traj.times, traj.values):
            w.writerow([_fmt(t), _fmt(x)])
    else:
        w.writerow(["t"] + [f"x{i + 1}" for i in range(traj.dim)])
        for t, row in zip(traj.times, traj.values):
            w.writerow([_fmt(t)] + [_fmt(x) for x in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def trajectory_from_csv(path) -> Trajectory:
    """Read a file written by :func:`trajectory_to_csv`; lines starting with ``#`` are skipped."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    if not rows or rows[0][0].strip() != "t":
        raise ValueError(f"{path}: expected a header starting with 't'")
    data = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValueError(f"{path}: expected at least two columns")
    values = data[:, 1] if data.shape[1] == 2 else data[:, 1:]
    return Trajectory(data[:, 0], values)
