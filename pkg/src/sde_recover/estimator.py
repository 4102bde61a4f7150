"""MAP recovery of drift and volatility values from one observed trajectory.

Model for each increment: ``Y_n = f(X_n) dt_n + sigma(X_n) sqrt(dt_n) xi_n + eps_n``
with independent GP priors ``f ~ GP(0, K)``, ``sigma ~ GP(0, G)`` and
``eps_n ~ N(0, lam)``. For fixed ``sigma_bar`` the drift values have a closed
form, which leaves a profile loss in ``sigma_bar`` alone. Substituting the
optimal drift gives

    L(sigma) = Y^T A^-1 Y + sum_n log(D_n) + sigma^T G^-1 sigma,
    A = Lambda K Lambda + diag(D),   D_n = sigma_n^2 dt_n + lam,

which needs no inverse of ``K`` and is what the optimizers work with.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
import scipy.linalg

from .kernels import HyperParams, diag, gram
from .numerics import DimensionMismatchError, SpdFactor, factor_spd, solve_spd
from .simulate import ObservationSet

log = logging.getLogger(__name__)

NORM_BOUNDED_GD = "NormBoundedGD"
NEWTON_ARMIJO = "NewtonArmijo"
WHITENED = "whitened"
RAW = "raw"
SQRT_QUAD_VAR = "SqrtQuadVar"
LITERAL_QUAD_VAR = "LiteralQuadVar"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"loss is {value} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


@dataclass(frozen=True)
class FitConfig:
    hp: HyperParams
    optimizer: str = NORM_BOUNDED_GD
    gd_max_iters: int = 100_000
    gd_p_floor: float = 1e-20
    gd_p_init: float = 1.0
    gd_grad_tol: float = 0.0
    gd_coordinates: str = WHITENED
    newton_grad_tol: float = 1e-8
    newton_max_iters: int = 1000
    init_mode: str = SQRT_QUAD_VAR

    def __post_init__(self):
        if self.optimizer not in (NORM_BOUNDED_GD, NEWTON_ARMIJO):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.gd_coordinates not in (WHITENED, RAW):
            raise ValueError(f"unknown gd_coordinates {self.gd_coordinates!r}")
        if self.init_mode not in (SQRT_QUAD_VAR, LITERAL_QUAD_VAR):
            raise ValueError(f"unknown init mode {self.init_mode!r}")
        if not (self.gd_p_floor > 0 and self.newton_grad_tol > 0 and self.gd_p_init > 0):
            raise ValueError("tolerances must be positive")
        if self.gd_max_iters < 0 or self.newton_max_iters < 0:
            raise ValueError("iteration caps must be nonnegative")

    def replace(self, **changes) -> "FitConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "hp"}
        out["hp"] = self.hp.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "FitConfig":
        kwargs = {k: v for k, v in data.items() if k != "hp"}
        return cls(hp=HyperParams.from_dict(data["hp"]), **kwargs)


def _check_length(name, vec, n):
    v = np.asarray(vec, dtype=float).ravel()
    if v.shape[0] != n:
        raise DimensionMismatchError(f"{name} has length {v.shape[0]}, expected {n}")
    return v


class MapProblem:
    """Cached Gram matrices for one (observations, hyperparameters) pair.

    The drift Gram ``K`` and the factor of the volatility Gram ``G`` are
    computed once; everything depending on ``sigma_bar`` is recomputed per
    call.
    """

    def __init__(self, obs: ObservationSet, hp: HyperParams):
        if np.asarray(obs.Y).ndim != 1:
            raise ValueError("MapProblem takes scalar increments; use ObservationSet.component")
        self.obs = obs
        self.hp = hp
        self.X = obs.X
        self.Y = obs.Y
        self.dt = obs.dt
        self.lam = hp.lam
        self.n = len(obs)
        self.K = gram(hp.drift_kernel, obs.X)
        self.LKL = self.dt[:, None] * self.K * self.dt[None, :]
        self.G = gram(hp.vol_kernel, obs.X)
        self._g_factor: SpdFactor | None = None
        self._g_inv: np.ndarray | None = None
        self._k_factor: SpdFactor | None = None

    @property
    def g_factor(self) -> SpdFactor:
        if self._g_factor is None:
            self._g_factor = factor_spd(self.G)
        return self._g_factor

    @property
    def g_inv(self) -> np.ndarray:
        if self._g_inv is None:
            inv = self.g_factor.inverse()
            self._g_inv = 0.5 * (inv + inv.T)
        return self._g_inv

    @property
    def k_factor(self) -> SpdFactor:
        if self._k_factor is None:
            self._k_factor = factor_spd(self.K)
        return self._k_factor

    def noise(self, sigma) -> np.ndarray:
        return sigma * sigma * self.dt + self.lam

    def a_factor(self, sigma) -> SpdFactor:
        a = self.LKL.copy()
        a.flat[::self.n + 1] += self.noise(sigma)
        # diag(noise) >= lam > 0, so the plain factorization almost never fails
        try:
            return SpdFactor(np.linalg.cholesky(a), 0.0)
        except np.linalg.LinAlgError:
            return factor_spd(a)

    # -- closed forms ------------------------------------------------------
    def drift_given_sigma(self, sigma) -> np.ndarray:
        sigma = _check_length("sigma_bar", sigma, self.n)
        alpha = solve_spd(self.a_factor(sigma), self.Y)
        return self.K @ (self.dt * alpha)

    def map_loss(self, f_bar, sigma) -> float:
        f_bar = _check_length("f_bar", f_bar, self.n)
        sigma = _check_length("sigma_bar", sigma, self.n)
        d = self.noise(sigma)
        r = self.Y - self.dt * f_bar
        data = float(np.sum(r * r / d))
        logs = float(np.sum(np.log(d)))
        f_prior = float(f_bar @ solve_spd(self.k_factor, f_bar))
        s_prior = float(sigma @ solve_spd(self.g_factor, sigma))
        return data + logs + f_prior + s_prior

    def loss_and_grad(self, sigma) -> tuple[float, np.ndarray]:
        """Profile loss and its gradient in one factorization."""
        sigma = _check_length("sigma_bar", sigma, self.n)
        d = self.noise(sigma)
        alpha = solve_spd(self.a_factor(sigma), self.Y)
        g_sigma = self.g_inv @ sigma
        loss = float(self.Y @ alpha) + float(np.sum(np.log(d))) + float(sigma @ g_sigma)
        s = 2.0 * sigma * self.dt
        grad = -alpha * alpha * s + s / d + 2.0 * g_sigma
        return loss, grad

    def loss(self, sigma) -> float:
        return self.loss_and_grad(sigma)[0]

    def grad(self, sigma) -> np.ndarray:
        return self.loss_and_grad(sigma)[1]

    def hessian(self, sigma) -> np.ndarray:
        sigma = _check_length("sigma_bar", sigma, self.n)
        d = self.noise(sigma)
        factor = self.a_factor(sigma)
        alpha = solve_spd(factor, self.Y)
        a_inv = factor.inverse()
        s = 2.0 * sigma * self.dt
        w = alpha * s
        h = 2.0 * np.outer(w, w) * a_inv
        h[np.diag_indices_from(h)] += (-2.0 * self.dt * alpha * alpha
                                       + 2.0 * self.dt / d - s * s / (d * d))
        h += 2.0 * self.g_inv
        return 0.5 * (h + h.T)

    # -- predictors --------------------------------------------------------
    def drift_posterior(self, x, sigma) -> "DriftPosterior":
        sigma = _check_length("sigma_bar", sigma, self.n)
        factor = self.a_factor(sigma)
        alpha = solve_spd(factor, self.Y)
        kx = gram(self.hp.drift_kernel, x, self.X)
        mean = kx @ (self.dt * alpha)
        b = kx * self.dt[None, :]
        v = solve_spd(factor, b.T)
        raw = diag(self.hp.drift_kernel, x) - np.sum(b.T * v, axis=0)
        return DriftPosterior(mean, np.maximum(raw, 0.0), float(np.min(raw)))

    def smoothing_weights(self, sigma_dagger) -> np.ndarray:
        """``(G + gamma I)^-1 sigma_dagger``."""
        sigma_dagger = _check_length("sigma_dagger", sigma_dagger, self.n)
        gamma = self.hp.gamma
        if gamma == 0.0:
            return solve_spd(self.g_factor, sigma_dagger)
        g = self.G.copy()
        g[np.diag_indices_from(g)] += gamma
        return solve_spd(factor_spd(g), sigma_dagger)

    def smooth(self, values) -> np.ndarray:
        values = _check_length("sigma_dagger", values, self.n)
        if self.hp.gamma == 0.0:
            return values.copy()
        # G (G + gI)^-1 v = v - g (G + gI)^-1 v
        return values - self.hp.gamma * self.smoothing_weights(values)

    def sigma_posterior(self, x, sigma_dagger) -> np.ndarray:
        w = self.smoothing_weights(sigma_dagger)
        return gram(self.hp.vol_kernel, x, self.X) @ w


class DriftPosterior(NamedTuple):
    mean: np.ndarray
    variance: np.ndarray
    min_variance_before_clamp: float


# --- functional surface ------------------------------------------------------

def map_loss(f_bar, sigma_bar, obs: ObservationSet, hp: HyperParams) -> float:
    return MapProblem(obs, hp).map_loss(f_bar, sigma_bar)


def drift_given_sigma(sigma_bar, obs: ObservationSet, hp: HyperParams) -> np.ndarray:
    return MapProblem(obs, hp).drift_given_sigma(sigma_bar)


def drift_posterior(x, sigma_bar, obs: ObservationSet, hp: HyperParams) -> DriftPosterior:
    return MapProblem(obs, hp).drift_posterior(x, sigma_bar)


def sigma_profile_loss(sigma_bar, obs: ObservationSet, hp: HyperParams) -> float:
    return MapProblem(obs, hp).loss(sigma_bar)


def sigma_profile_grad(sigma_bar, obs: ObservationSet, hp: HyperParams) -> np.ndarray:
    return MapProblem(obs, hp).grad(sigma_bar)


def smooth_sigma(sigma_dagger, obs: ObservationSet, hp: HyperParams) -> np.ndarray:
    return MapProblem(obs, hp).smooth(sigma_dagger)


def sigma_posterior(x, sigma_dagger, obs: ObservationSet, hp: HyperParams) -> np.ndarray:
    return MapProblem(obs, hp).sigma_posterior(x, sigma_dagger)


def raw_quadratic_variation(obs: ObservationSet, mode: str = SQRT_QUAD_VAR) -> np.ndarray:
    """Per-increment volatility guess before smoothing.

    The increment leaving ``X_i`` is paired with ``X_i``.
    """
    y = np.asarray(obs.Y, dtype=float)
    if mode == SQRT_QUAD_VAR:
        return np.abs(y) / np.sqrt(obs.dt)
    if mode == LITERAL_QUAD_VAR:
        return y * y / obs.dt
    raise ValueError(f"unknown init mode {mode!r}")


def init_sigma(obs: ObservationSet, hp: HyperParams, mode: str = SQRT_QUAD_VAR,
               problem: MapProblem | None = None) -> np.ndarray:
    problem = problem or MapProblem(obs, hp)
    return problem.smooth(raw_quadratic_variation(obs, mode))


# --- optimizers ------------------------------------------------------------

@dataclass
class OptimizeResult:
    x: np.ndarray
    loss_trace: list[float]
    iterations: int
    reason: str

    @property
    def fun(self) -> float:
        return self.loss_trace[-1]


def _safe_eval(fun_and_grad, x):
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            f, g = fun_and_grad(x)
    except (np.linalg.LinAlgError, FloatingPointError, ValueError):
        return math.inf, None
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        return math.inf, None
    return f, g


def _start(fun_and_grad, x0):
    x = np.array(x0, dtype=float)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        f, g = fun_and_grad(x)
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteLossError(0, f)
    return x, f, np.asarray(g, dtype=float)


def norm_bounded_gd(fun_and_grad: Callable, x0, *, p_init: float = 1.0, p_floor: float = 1e-20,
                    max_iters: int = 100_000, grad_tol: float = 0.0,
                    shrink: float = 0.9) -> OptimizeResult:
    """Descent along the negative gradient with steps of ``p`` percent of ``||x||``.

    A trial that does not strictly reduce the loss is rejected and ``p`` is
    multiplied by ``shrink``. Every trial counts as an iteration.
    """
    x, f, g = _start(fun_and_grad, x0)
    trace = [f]
    p = p_init
    it = 0
    reason = "max_iters"
    while it < max_iters:
        if p < p_floor:
            reason = "p_floor"
            break
        gnorm = float(np.linalg.norm(g))
        if gnorm <= grad_tol or gnorm == 0.0:
            reason = "grad_tol"
            break
        length = (p / 100.0) * max(float(np.linalg.norm(x)), 1e-12)
        trial = x - (length / gnorm) * g
        it += 1
        ft, gt = _safe_eval(fun_and_grad, trial)
        if ft < f:
            x, f, g = trial, ft, np.asarray(gt, dtype=float)
            trace.append(f)
        else:
            p *= shrink
    return OptimizeResult(x, trace, it, reason)


def _newton_direction(h, g, ladder=(0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2, 1e4)):
    scale = float(np.mean(np.abs(np.diag(h)))) or 1.0
    eye = np.eye(h.shape[0])
    for mu in ladder:
        try:
            lower = np.linalg.cholesky(h + mu * scale * eye)
        except np.linalg.LinAlgError:
            continue
        y = np.linalg.solve(lower, -g)
        d = np.linalg.solve(lower.T, y)
        if np.all(np.isfinite(d)) and float(g @ d) < 0.0:
            return d
    return -g


def newton_armijo(fun_and_grad: Callable, hess: Callable, x0, *, grad_tol: float = 1e-8,
                  max_iters: int = 1000, c1: float = 1e-4,
                  max_halvings: int = 60) -> OptimizeResult:
    """Newton steps on a regularized Hessian with Armijo backtracking by halving."""
    x, f, g = _start(fun_and_grad, x0)
    trace = [f]
    it = 0
    reason = "max_iters"
    while it < max_iters:
        if float(np.linalg.norm(g)) < grad_tol:
            reason = "grad_tol"
            break
        d = _newton_direction(np.asarray(hess(x), dtype=float), g)
        slope = float(g @ d)
        t = 1.0
        it += 1
        for _ in range(max_halvings):
            trial = x + t * d
            ft, gt = _safe_eval(fun_and_grad, trial)
            if ft <= f + c1 * t * slope and ft < f:
                break
            t *= 0.5
        else:
            reason = "line_search"
            break
        x, f, g = trial, ft, np.asarray(gt, dtype=float)
        trace.append(f)
    return OptimizeResult(x, trace, it, reason)


def minimize_sigma(obs: ObservationSet, hp: HyperParams, config: FitConfig,
                   sigma_init=None, problem: MapProblem | None = None) -> OptimizeResult:
    problem = problem or MapProblem(obs, hp)
    if sigma_init is None:
        sigma_init = init_sigma(obs, hp, config.init_mode, problem=problem)
    if config.optimizer == NORM_BOUNDED_GD:
        gd = dict(p_init=config.gd_p_init, p_floor=config.gd_p_floor,
                  max_iters=config.gd_max_iters, grad_tol=config.gd_grad_tol)
        if config.gd_coordinates == RAW:
            return norm_bounded_gd(problem.loss_and_grad, sigma_init, **gd)
        # sigma = L z with G + jI = L L^T: the prior term becomes ||z||^2
        lower = problem.g_factor.lower

        def loss_and_grad_z(z):
            f, g = problem.loss_and_grad(lower @ z)
            return f, lower.T @ g

        z0 = scipy.linalg.solve_triangular(lower, sigma_init, lower=True)
        res = norm_bounded_gd(loss_and_grad_z, z0, **gd)
        res.x = lower @ res.x
        return res
    return newton_armijo(problem.loss_and_grad, problem.hessian, sigma_init,
                         grad_tol=config.newton_grad_tol, max_iters=config.newton_max_iters)


# --- orchestration -----------------------------------------------------------

@dataclass
class FitResult:
    sigma_dagger: np.ndarray
    sigma_bar: np.ndarray
    f_bar: np.ndarray
    loss_trace: list[float]
    final_loss: float
    iterations: int
    stop_reason: str
    config: FitConfig
    training: ObservationSet = field(repr=False)
    _problem: MapProblem | None = field(default=None, repr=False, compare=False)

    @property
    def training_X(self) -> np.ndarray:
        return self.training.X

    @property
    def problem(self) -> MapProblem:
        if self._problem is None:
            self._problem = MapProblem(self.training, self.config.hp)
        return self._problem

    def predict_drift(self, x) -> DriftPosterior:
        """Drift posterior at ``x`` with the noise built from the smoothed volatility."""
        return self.problem.drift_posterior(x, self.sigma_bar)

    def predict_sigma(self, x) -> np.ndarray:
        return self.problem.sigma_posterior(x, self.sigma_dagger)

    def to_dict(self, include_trace: bool = False) -> dict:
        out = {
            "sigma_dagger": self.sigma_dagger.tolist(),
            "sigma_bar": self.sigma_bar.tolist(),
            "f_bar": self.f_bar.tolist(),
            "final_loss": self.final_loss,
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "config": self.config.to_dict(),
        }
        if include_trace:
            out["loss_trace"] = list(self.loss_trace)
        return out


def fit(obs: ObservationSet, config: FitConfig) -> FitResult:
    """Initialize, minimize the profile loss, smooth, then solve for the drift."""
    if len(obs) < 2:
        raise ValueError("fit needs at least two observations")
    problem = MapProblem(obs, config.hp)
    sigma0 = init_sigma(obs, config.hp, config.init_mode, problem=problem)
    opt = minimize_sigma(obs, config.hp, config, sigma_init=sigma0, problem=problem)
    sigma_bar = problem.smooth(opt.x)
    f_bar = problem.drift_given_sigma(sigma_bar)
    log.debug("fit: N=%d iterations=%d loss %.6g -> %.6g (%s)", len(obs), opt.iterations,
              opt.loss_trace[0], opt.loss_trace[-1], opt.reason)
    return FitResult(opt.x, sigma_bar, f_bar, opt.loss_trace, opt.loss_trace[-1],
                     opt.iterations, opt.reason, config, obs, problem)


def fit_multivariate(obs: ObservationSet, configs: FitConfig | Sequence[FitConfig]) -> list[FitResult]:
    """Independent per-dimension fits under a diagonal diffusion.

    Every dimension conditions on the full state ``X``; dimension ``i`` uses
    the increments ``Y[:, i]``.
    """
    y = np.asarray(obs.Y)
    if y.ndim == 1:
        y = y[:, None]
        obs = ObservationSet(obs.X, y, obs.dt)
    d = y.shape[1]
    if isinstance(configs, FitConfig):
        configs = [configs] * d
    if len(configs) != d:
        raise ValueError(f"got {len(configs)} configs for {d} dimensions")
    return [fit(obs.component(i), configs[i]) for i in range(d)]


def coupled_row_loss(f_bar, sigma_row, obs: ObservationSet, hp: HyperParams) -> float:
    """MAP loss for one output dimension with a full row of diffusion values.

    ``sigma_row`` has shape (N, m): column j holds the values of
    ``sigma_{i,j}`` at the states. Noise variance per point is
    ``dt_k * sum_j sigma_{k,j}^2 + lam`` and every column gets the same prior
    ``G``. With a single column this is :func:`map_loss`.
    """
    problem = MapProblem(obs, hp)
    s = np.asarray(sigma_row, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] != problem.n:
        raise DimensionMismatchError(f"sigma_row has {s.shape[0]} rows, expected {problem.n}")
    f_bar = _check_length("f_bar", f_bar, problem.n)
    d = problem.dt * np.sum(s * s, axis=1) + problem.lam
    r = problem.Y - problem.dt * f_bar
    total = float(np.sum(r * r / d)) + float(np.sum(np.log(d)))
    total += float(f_bar @ solve_spd(problem.k_factor, f_bar))
    total += float(np.sum(s * solve_spd(problem.g_factor, s)))
    return total


def increment_nll(y, f, sigma, dt, lam) -> np.ndarray:
    """Per-point Gaussian negative log-likelihood of increments, constants dropped."""
    v = np.asarray(sigma) ** 2 * dt + lam
    r = np.asarray(y) - np.asarray(f) * dt
    return r * r / (2.0 * v) + 0.5 * np.log(v)
