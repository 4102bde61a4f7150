"""Covariance functions, hyperparameter containers and their search-space encoding."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

MATERN52 = "Matern52"
LINEAR = "Linear"
WHITE_NOISE = "WhiteNoise"

PARAM_NAMES = {
    MATERN52: ("variance", "lengthscale"),
    LINEAR: ("variance", "offset"),
    WHITE_NOISE: ("level",),
}

LENGTHSCALE_FLOOR = 1e-6
SQRT5 = math.sqrt(5.0)


class InvalidParamsError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class TooFewPointsError(ValueError):
    pass


class OutOfBoundsError(ValueError):
    pass


def as_points(x) -> np.ndarray:
    """Coerce a point list to shape (n, d); 1-D input is read as n scalar points."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a[:, None]
    return a


@dataclass(frozen=True)
class KernelSpec:
    family: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in PARAM_NAMES:
            raise InvalidParamsError(f"unknown kernel family {self.family!r}")
        expected = PARAM_NAMES[self.family]
        if set(self.params) != set(expected):
            raise InvalidParamsError(
                f"{self.family} needs parameters {expected}, got {tuple(self.params)}")
        params = {k: float(self.params[k]) for k in expected}
        for name, value in params.items():
            if not math.isfinite(value):
                raise InvalidParamsError(f"{name} must be finite")
        if self.family == MATERN52:
            if params["variance"] <= 0 or params["lengthscale"] <= 0:
                raise InvalidParamsError("Matern52 needs variance > 0 and lengthscale > 0")
        elif self.family == LINEAR:
            if params["variance"] <= 0 or params["offset"] < 0:
                raise InvalidParamsError("Linear needs variance > 0 and offset >= 0")
        elif params["level"] < 0:
            raise InvalidParamsError("WhiteNoise needs level >= 0")
        object.__setattr__(self, "params", MappingProxyType(params))

    @classmethod
    def matern52(cls, variance=1.0, lengthscale=1.0) -> "KernelSpec":
        return cls(MATERN52, {"variance": variance, "lengthscale": lengthscale})

    @classmethod
    def linear(cls, variance=1.0, offset=1.0) -> "KernelSpec":
        return cls(LINEAR, {"variance": variance, "offset": offset})

    @classmethod
    def white_noise(cls, level=1.0) -> "KernelSpec":
        return cls(WHITE_NOISE, {"level": level})

    def with_params(self, **updates) -> "KernelSpec":
        return KernelSpec(self.family, {**self.params, **updates})

    def to_dict(self) -> dict:
        return {"family": self.family, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "KernelSpec":
        return cls(data["family"], dict(data.get("params", {})))

    def __hash__(self):
        return hash((self.family, tuple(self.params.items())))

    def __eq__(self, other):
        if not isinstance(other, KernelSpec):
            return NotImplemented
        return self.family == other.family and dict(self.params) == dict(other.params)


def _matern52_from_distance(r, variance, lengthscale):
    s = SQRT5 * r / lengthscale
    return variance * (1.0 + s + s * s / 3.0) * np.exp(-s)


def gram(kernel: KernelSpec, X, Z=None) -> np.ndarray:
    """Kernel matrix with entries ``k(X_i, Z_j)``; ``Z=None`` means ``Z = X``."""
    xa = as_points(X)
    za = xa if Z is None else as_points(Z)
    if xa.shape[0] == 0 or za.shape[0] == 0:
        raise EmptyInputError("gram needs nonempty point lists")
    if xa.shape[1] != za.shape[1]:
        raise ValueError(f"point dimensions differ: {xa.shape[1]} vs {za.shape[1]}")
    p = kernel.params
    if kernel.family == MATERN52:
        if xa.shape[1] == 1:
            r = np.abs(xa - za.T)
        else:
            r = cdist(xa, za)
        out = _matern52_from_distance(r, p["variance"], p["lengthscale"])
    elif kernel.family == LINEAR:
        out = p["variance"] * (xa @ za.T + p["offset"])
    else:
        same = np.all(xa[:, None, :] == za[None, :, :], axis=2)
        out = p["level"] * same.astype(float)
    if Z is None:
        out = 0.5 * (out + out.T)
    return out


def evaluate(kernel: KernelSpec, x, y) -> float:
    """Covariance between two single points."""
    xa = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1)
    ya = np.atleast_1d(np.asarray(y, dtype=float)).reshape(1, -1)
    return float(gram(kernel, xa, ya)[0, 0])


def diag(kernel: KernelSpec, X) -> np.ndarray:
    """``k(X_i, X_i)`` without building the full matrix."""
    xa = as_points(X)
    p = kernel.params
    if kernel.family == MATERN52:
        return np.full(xa.shape[0], p["variance"])
    if kernel.family == LINEAR:
        return p["variance"] * (np.sum(xa * xa, axis=1) + p["offset"])
    return np.full(xa.shape[0], p["level"])


def default_lengthscale(X) -> float:
    """Mean Euclidean distance over ordered pairs of distinct indices.

    Not floored; see :func:`default_kernel` for the floored value.
    """
    xa = as_points(X)
    n = xa.shape[0]
    if n < 2:
        raise TooFewPointsError("need at least two points")
    if xa.shape[1] == 1:
        # sum_{i<j} |x_i - x_j| from the sorted order, O(n log n)
        s = np.sort(xa[:, 0])
        weights = 2.0 * np.arange(n) - (n - 1)
        pair_sum = float(np.dot(weights, s))
    else:
        pair_sum = float(np.sum(pdist(xa)))
    return 2.0 * pair_sum / (n * (n - 1))


def default_kernel(family: str, X) -> KernelSpec:
    """The unoptimized kernel: data-driven lengthscale, every other parameter 1.0."""
    if family == MATERN52:
        ell = max(default_lengthscale(X), LENGTHSCALE_FLOOR)
        return KernelSpec.matern52(1.0, ell)
    if family == LINEAR:
        return KernelSpec.linear(1.0, 1.0)
    if family == WHITE_NOISE:
        return KernelSpec.white_noise(1.0)
    raise InvalidParamsError(f"unknown kernel family {family!r}")


@dataclass(frozen=True)
class HyperParams:
    """Priors on drift and volatility plus the two noise variances.

    ``lam`` is the variance of the discretization noise added to every
    increment; ``gamma`` is the noise variance used when smoothing the raw
    volatility minimizer through the volatility prior.
    """

    drift_kernel: KernelSpec
    vol_kernel: KernelSpec
    lam: float
    gamma: float = 1e-4

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise InvalidParamsError("lambda must be positive and finite")
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise InvalidParamsError("gamma must be nonnegative and finite")

    def replace(self, **changes) -> "HyperParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "drift_kernel": self.drift_kernel.to_dict(),
            "vol_kernel": self.vol_kernel.to_dict(),
            "lambda": self.lam,
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "HyperParams":
        return cls(
            drift_kernel=KernelSpec.from_dict(data["drift_kernel"]),
            vol_kernel=KernelSpec.from_dict(data["vol_kernel"]),
            lam=float(data["lambda"]),
            gamma=float(data.get("gamma", 1e-4)),
        )


DEFAULT_GAMMA = 1e-4
DEFAULT_LAMBDA_FACTOR = 0.01


def default_lambda(dt) -> float:
    return DEFAULT_LAMBDA_FACTOR * float(np.mean(dt))


def default_hyperparams(X, dt, drift_family=MATERN52, vol_family=MATERN52,
                        lam=None, gamma=DEFAULT_GAMMA) -> HyperParams:
    return HyperParams(
        drift_kernel=default_kernel(drift_family, X),
        vol_kernel=default_kernel(vol_family, X),
        lam=default_lambda(dt) if lam is None else lam,
        gamma=gamma,
    )


# --- search-space encoding -------------------------------------------------

@dataclass(frozen=True)
class ParamBound:
    """One searched coordinate.

    ``target`` is ``"drift"``, ``"vol"``, ``"lambda"`` or ``"gamma"``; ``name``
    is the kernel parameter name (ignored for the two noise variances). With
    ``log=True`` the coordinate is ``log10`` of the parameter.
    """

    target: str
    name: str
    low: float
    high: float
    log: bool = True

    @property
    def label(self) -> str:
        return self.target if self.target in ("lambda", "gamma") else f"{self.target}.{self.name}"


@dataclass(frozen=True)
class SearchSpace:
    base: HyperParams
    bounds: tuple[ParamBound, ...]

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def labels(self) -> list[str]:
        return [b.label for b in self.bounds]

    def box(self) -> np.ndarray:
        return np.array([[b.low, b.high] for b in self.bounds], dtype=float).reshape(-1, 2)


def _kernel_bounds(target: str, kernel: KernelSpec, width: float, offset_max: float):
    out = []
    for name in PARAM_NAMES[kernel.family]:
        value = kernel.params[name]
        if kernel.family == LINEAR and name == "offset":
            out.append(ParamBound(target, name, 0.0, offset_max, log=False))
        else:
            center = math.log10(max(value, 1e-300))
            out.append(ParamBound(target, name, center - width, center + width))
    return out


def default_search_space(hp: HyperParams, *, width: float = 3.0, offset_max: float = 10.0,
                         include_noise: bool = False) -> SearchSpace:
    """Bounds of +-``width`` decades around each positive parameter of ``hp``."""
    bounds = _kernel_bounds("drift", hp.drift_kernel, width, offset_max)
    bounds += _kernel_bounds("vol", hp.vol_kernel, width, offset_max)
    if include_noise:
        bounds.append(ParamBound("lambda", "lambda", math.log10(hp.lam) - width,
                                 math.log10(hp.lam) + width))
        g = hp.gamma if hp.gamma > 0 else DEFAULT_GAMMA
        bounds.append(ParamBound("gamma", "gamma", math.log10(g) - width, math.log10(g) + width))
    return SearchSpace(base=hp, bounds=tuple(bounds))


def _read(hp: HyperParams, b: ParamBound) -> float:
    if b.target == "lambda":
        return hp.lam
    if b.target == "gamma":
        return hp.gamma
    kernel = hp.drift_kernel if b.target == "drift" else hp.vol_kernel
    return kernel.params[b.name]


def encode_params(hp: HyperParams, space: SearchSpace, *, atol: float = 1e-9) -> np.ndarray:
    """Map hyperparameters to search coordinates, raising if any is out of bounds."""
    vec = np.empty(space.dim)
    for i, b in enumerate(space.bounds):
        value = _read(hp, b)
        if b.log:
            if value <= 0:
                raise OutOfBoundsError(f"{b.label}={value} cannot be log-encoded")
            value = math.log10(value)
        if value < b.low - atol or value > b.high + atol:
            raise OutOfBoundsError(f"{b.label}={value} outside [{b.low}, {b.high}]")
        vec[i] = value
    return vec


def decode_params(vector, space: SearchSpace, *, atol: float = 1e-9) -> HyperParams:
    v = np.asarray(vector, dtype=float).ravel()
    if v.shape[0] != space.dim:
        raise ValueError(f"vector has length {v.shape[0]}, search space has {space.dim}")
    updates = {"drift": {}, "vol": {}}
    lam, gamma = space.base.lam, space.base.gamma
    for value, b in zip(v, space.bounds):
        if not (b.low - atol <= value <= b.high + atol):
            raise OutOfBoundsError(f"{b.label}={value} outside [{b.low}, {b.high}]")
        actual = 10.0 ** value if b.log else float(value)
        if b.target == "lambda":
            lam = actual
        elif b.target == "gamma":
            gamma = actual
        else:
            updates[b.target][b.name] = actual
    base = space.base
    return HyperParams(
        drift_kernel=base.drift_kernel.with_params(**updates["drift"]),
        vol_kernel=base.vol_kernel.with_params(**updates["vol"]),
        lam=lam,
        gamma=gamma,
    )


def search_space_to_dict(space: SearchSpace) -> dict:
    return {
        "base": space.base.to_dict(),
        "bounds": [
            {"target": b.target, "name": b.name, "low": b.low, "high": b.high, "log": b.log}
            for b in space.bounds
        ],
    }


def search_space_from_dict(data: Mapping) -> SearchSpace:
    return SearchSpace(
        base=HyperParams.from_dict(data["base"]),
        bounds=tuple(ParamBound(**b) for b in data["bounds"]),
    )


def bounds_from_overrides(hp: HyperParams, overrides: Sequence[Mapping] | None,
                          **kwargs) -> SearchSpace:
    """Default search space with individual bounds replaced by label."""
    space = default_search_space(hp, **kwargs)
    if not overrides:
        return space
    by_label = {o["label"]: o for o in overrides}
    bounds = []
    for b in space.bounds:
        o = by_label.get(b.label)
        bounds.append(b if o is None else replace(b, low=float(o["low"]), high=float(o["high"]),
                                                  log=bool(o.get("log", b.log))))
    return SearchSpace(space.base, tuple(bounds))
