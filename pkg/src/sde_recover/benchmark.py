"""Baseline: homoscedastic GP regression of increments on states.

Increments are modeled as ``y(x) = xi(x) + W(x)`` with a smooth GP ``xi`` and a
white-noise term of level ``c``; kernel parameters minimize the negative log
marginal likelihood. Drift is the posterior mean divided by ``dt`` and the
volatility is ``sqrt(c / dt)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np
from scipy.optimize import minimize

from .hyperlearn import bayes_opt_minimize
from .kernels import (LENGTHSCALE_FLOOR, LINEAR, MATERN52, PARAM_NAMES, KernelSpec, as_points,
                      default_lengthscale, diag, gram)
from .numerics import FactorizationError, SpdFactor, factor_spd, log_det, solve_spd


def _total_gram(smooth_kernel: KernelSpec, noise_level: float, X) -> np.ndarray:
    k = gram(smooth_kernel, X)
    return k + gram(KernelSpec.white_noise(noise_level), X)


def log_marginal_nll(smooth_kernel: KernelSpec, noise_level: float, X, Y,
                     log_det_weight: float = 1.0) -> float:
    """``0.5 * Y^T K^-1 Y + w * log det K`` with ``K = K'(X, X) + c * delta``.

    The default ``w = 1`` is the proportional form with constants dropped;
    ``w = 0.5`` is the exact Gaussian negative log-likelihood (up to the
    ``N/2 log 2 pi`` constant), whose minimizer in ``c`` is the consistent
    noise-level estimate.
    """
    y = np.asarray(Y, dtype=float).ravel()
    factor = factor_spd(_total_gram(smooth_kernel, noise_level, X), jitter_ladder=(0.0,))
    return 0.5 * float(y @ solve_spd(factor, y)) + log_det_weight * log_det(factor)


@dataclass(frozen=True)
class BenchmarkSearch:
    """Search settings; positive parameters are searched in log10 within
    ``+-width`` decades of their data-scaled defaults."""

    budget: int = 60
    seed: int = 0
    width: float = 3.0
    offset_max: float = 10.0
    polish: bool = True
    log_det_weight: float = 0.5  # weight of log det K in the minimized objective

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: Mapping) -> "BenchmarkSearch":
        return cls(**data)


@dataclass
class BenchmarkModel:
    smooth_kernel: KernelSpec
    noise_level: float
    X: np.ndarray
    Y: np.ndarray
    factor: SpdFactor
    nll: float  # objective value at the fitted parameters

    @property
    def alpha(self) -> np.ndarray:
        return solve_spd(self.factor, self.Y)

    def to_dict(self) -> dict:
        return {
            "smooth_kernel": self.smooth_kernel.to_dict(),
            "noise_level": self.noise_level,
            "nll": self.nll,
            "n_train": int(self.Y.shape[0]),
        }


def _build(smooth_kernel, noise_level, X, Y, log_det_weight=0.5) -> BenchmarkModel:
    y = np.asarray(Y, dtype=float).ravel()
    factor = factor_spd(_total_gram(smooth_kernel, noise_level, X))
    nll = 0.5 * float(y @ solve_spd(factor, y)) + log_det_weight * log_det(factor)
    return BenchmarkModel(smooth_kernel, noise_level, np.asarray(X, dtype=float), y, factor, nll)


def default_benchmark_kernel(family: str, X, Y) -> tuple[KernelSpec, float]:
    """Starting point: amplitudes at the sample variance of ``Y``."""
    v = float(np.var(np.asarray(Y, dtype=float)))
    v = v if v > 0 else 1.0
    if family == MATERN52:
        ell = max(default_lengthscale(X), LENGTHSCALE_FLOOR)
        return KernelSpec.matern52(v, ell), v
    if family == LINEAR:
        return KernelSpec.linear(v, 1.0), v
    raise ValueError(f"unsupported smooth family {family!r}")


def fit_benchmark(X, Y, family: str = MATERN52,
                  search: BenchmarkSearch | None = None) -> BenchmarkModel:
    """Minimize :func:`log_marginal_nll` over the smooth-kernel parameters and ``c``.

    Bayesian optimization over the log box, then (optionally) a Nelder-Mead
    polish started from the best point and clipped to the box.
    """
    search = search or BenchmarkSearch()
    if np.asarray(Y).shape[0] < 4:
        raise ValueError("fit_benchmark needs at least 4 points")
    kernel0, c0 = default_benchmark_kernel(family, X, Y)
    names = PARAM_NAMES[family]
    bounds, is_log = [], []
    for name in names:
        value = kernel0.params[name]
        if family == LINEAR and name == "offset":
            bounds.append((0.0, search.offset_max))
            is_log.append(False)
        else:
            bounds.append((math.log10(value) - search.width, math.log10(value) + search.width))
            is_log.append(True)
    bounds.append((math.log10(c0) - search.width, math.log10(c0) + search.width))
    is_log.append(True)
    box = np.array(bounds)

    def unpack(v):
        vals = [10.0 ** a if lg else float(a) for a, lg in zip(v, is_log)]
        return KernelSpec(family, dict(zip(names, vals[:-1]))), vals[-1]

    def objective(v):
        kernel, c = unpack(np.clip(v, box[:, 0], box[:, 1]))
        try:
            return log_marginal_nll(kernel, c, X, Y, search.log_det_weight)
        except FactorizationError:
            return math.inf

    x0 = np.array([math.log10(kernel0.params[n]) if lg else kernel0.params[n]
                   for n, lg in zip(names, is_log)] + [math.log10(c0)])
    res = bayes_opt_minimize(objective, box, search.budget, seed=search.seed, x0=x0)
    best_x, best_f = res.x_best, res.best_value
    if search.polish:
        polished = minimize(objective, best_x, method="Nelder-Mead",
                            options={"xatol": 1e-4, "fatol": 1e-8, "maxiter": 400})
        if np.isfinite(polished.fun) and polished.fun < best_f:
            best_x = np.clip(polished.x, box[:, 0], box[:, 1])
    kernel, c = unpack(best_x)
    return _build(kernel, c, X, Y, search.log_det_weight)


class BenchmarkPrediction(NamedTuple):
    drift: np.ndarray
    volatility: np.ndarray
    predictive_volatility: np.ndarray  # sqrt of the full predictive variance of y, over dt


def predict_benchmark(model: BenchmarkModel, x, dt) -> BenchmarkPrediction:
    """Drift ``m(x) / dt`` and constant volatility ``sqrt(c / dt)``.

    ``dt`` may be an array; its mean is used.
    """
    dt = float(np.mean(dt))
    if not dt > 0:
        raise ValueError("dt must be positive")
    kx = gram(model.smooth_kernel, x, model.X)
    mean = kx @ model.alpha
    v = solve_spd(model.factor, kx.T)
    var_y = diag(model.smooth_kernel, x) + model.noise_level - np.sum(kx.T * v, axis=0)
    n = as_points(x).shape[0]
    vol = np.full(n, math.sqrt(model.noise_level / dt))
    return BenchmarkPrediction(mean / dt, vol, np.sqrt(np.maximum(var_y, 0.0) / dt))
