"""Kernel hyperparameter learning by randomized cross-validation.

The objective for a hyperparameter vector is the validation negative
log-likelihood averaged over ``M`` random half/half splits of the training
data; a Bayesian optimizer with a Matern-5/2 GP surrogate and expected
improvement minimizes it without gradients.
"""
from __future__ import annotations

import logging
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import norm, qmc

from .estimator import NEWTON_ARMIJO, FitConfig, fit, increment_nll
from .kernels import (HyperParams, OutOfBoundsError, SearchSpace, decode_params,
                      default_search_space, encode_params, search_space_from_dict,
                      search_space_to_dict)
from .numerics import FactorizationError, factor_spd, solve_spd
from .simulate import ObservationSet

log = logging.getLogger(__name__)

N_INITIAL_DESIGN = 10
N_EI_CANDIDATES = 1024
N_LOCAL_CANDIDATES = 128
SURROGATE_LENGTHSCALES = (0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5)


class TooFewError(ValueError):
    pass


class BudgetTooSmallError(ValueError):
    pass


def derive_seed(seed: int, *labels) -> int:
    """Stable 63-bit subseed from a base seed and string/int labels."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for label in labels:
        words.append(zlib.crc32(str(label).encode()) if isinstance(label, str)
                     else int(label) & 0xFFFFFFFF)
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("SDE_RECOVER_THREADS", "1")))
    except ValueError:
        return 1


# --- configs -----------------------------------------------------------------

@dataclass(frozen=True)
class CvConfig:
    m_partitions: int = 1
    budget: int = 75
    seed: int = 0
    search_space: SearchSpace | None = None
    include_noise: bool = False
    n_initial: int = N_INITIAL_DESIGN

    def __post_init__(self):
        if self.m_partitions < 1:
            raise ValueError("m_partitions must be >= 1")
        if self.budget < 1:
            raise BudgetTooSmallError("budget must be >= 1")

    @classmethod
    def for_optimizer(cls, optimizer: str, **kw) -> "CvConfig":
        if optimizer == NEWTON_ARMIJO:
            return cls(m_partitions=10, budget=150, **kw)
        return cls(m_partitions=1, budget=75, **kw)

    def replace(self, **changes) -> "CvConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "m_partitions": self.m_partitions,
            "budget": self.budget,
            "seed": self.seed,
            "include_noise": self.include_noise,
            "n_initial": self.n_initial,
            "search_space": None if self.search_space is None
            else search_space_to_dict(self.search_space),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CvConfig":
        kw = dict(data)
        space = kw.pop("search_space", None)
        if space is not None:
            kw["search_space"] = search_space_from_dict(space)
        return cls(**kw)


@dataclass(frozen=True)
class Partition:
    """``valid_idx`` is scored; the model is fitted on ``train_idx``."""

    train_idx: np.ndarray
    valid_idx: np.ndarray


def random_partition(n: int, rng: np.random.Generator) -> Partition:
    """Uniform split of ``range(n)`` into halves; the validation side gets ``n // 2``."""
    if n < 4:
        raise TooFewError(f"need at least 4 points to partition, got {n}")
    perm = rng.permutation(n)
    half = n // 2
    return Partition(train_idx=np.sort(perm[half:]), valid_idx=np.sort(perm[:half]))


# --- cross-validation objective --------------------------------------------------

def cv_loss(hp: HyperParams, partition: Partition, obs: ObservationSet,
            fit_config: FitConfig) -> float:
    """Fit on the training half, return the summed validation NLL."""
    train = obs.subset(partition.train_idx)
    valid = obs.subset(partition.valid_idx)
    result = fit(train, fit_config.replace(hp=hp))
    f_pred = result.predict_drift(valid.X).mean
    s_pred = result.predict_sigma(valid.X)
    return float(np.sum(increment_nll(valid.Y, f_pred, s_pred, valid.dt, hp.lam)))


def empirical_cv_objective(hp: HyperParams, obs: ObservationSet, cv_config: CvConfig,
                           rng: np.random.Generator | None = None, fit_config: FitConfig | None = None,
                           partitions: Sequence[Partition] | None = None) -> float:
    """Mean of :func:`cv_loss` over ``M`` partitions drawn from ``rng`` (or given)."""
    if partitions is None:
        if rng is None:
            raise ValueError("need an rng or pinned partitions")
        partitions = [random_partition(len(obs), rng) for _ in range(cv_config.m_partitions)]
    fit_config = fit_config if fit_config is not None else FitConfig(hp=hp)
    workers = min(max_workers(), len(partitions))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            losses = list(pool.map(lambda p: cv_loss(hp, p, obs, fit_config), partitions))
    else:
        losses = [cv_loss(hp, p, obs, fit_config) for p in partitions]
    return float(np.mean(losses))


# --- Bayesian optimization -------------------------------------------------------

@dataclass
class Evaluation:
    x: np.ndarray
    value: float  # what the surrogate sees (penalized if the raw value was non-finite)
    raw: float
    stage: str  # "guess", "initial" or "ei"


@dataclass
class BayesOptResult:
    x_best: np.ndarray
    history: list[Evaluation]

    @property
    def best_value(self) -> float:
        return min(e.value for e in self.history)

    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate([e.value for e in self.history])


def _matern52_unit(r):
    s = math.sqrt(5.0) * r
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


class _Surrogate:
    """Zero-mean GP on standardized objective values over the unit cube."""

    def __init__(self, u: np.ndarray, y: np.ndarray):
        self.u = u
        self.mu = float(np.mean(y))
        sd = float(np.std(y))
        self.sd = sd if sd > 0 else 1.0
        z = (y - self.mu) / self.sd
        rng_ = float(np.ptp(z))
        nugget = 1e-6 * (rng_ if rng_ > 0 else 1.0)
        dist = np.sqrt(np.sum((u[:, None, :] - u[None, :, :]) ** 2, axis=2))
        best = None
        for ell in SURROGATE_LENGTHSCALES:
            k = _matern52_unit(dist / ell)
            k.flat[::k.shape[0] + 1] += nugget
            try:
                factor = factor_spd(k)
            except FactorizationError:
                continue
            alpha = solve_spd(factor, z)
            lml = -0.5 * float(z @ alpha) - 0.5 * factor.log_det()
            if best is None or lml > best[0]:
                best = (lml, ell, factor, alpha)
        if best is None:
            raise FactorizationError("surrogate Gram matrix could not be factored")
        _, self.ell, self.factor, self.alpha = best
        self.z_best = float(np.min(z))

    def predict(self, c: np.ndarray):
        dist = np.sqrt(np.sum((c[:, None, :] - self.u[None, :, :]) ** 2, axis=2))
        kc = _matern52_unit(dist / self.ell)
        mean = kc @ self.alpha
        v = solve_spd(self.factor, kc.T)
        var = np.maximum(1.0 - np.sum(kc.T * v, axis=0), 1e-12)
        return mean, np.sqrt(var)

    def expected_improvement(self, c: np.ndarray, xi: float = 0.01) -> np.ndarray:
        mean, sd = self.predict(c)
        imp = self.z_best - mean - xi
        t = imp / sd
        return imp * norm.cdf(t) + sd * norm.pdf(t)


def bayes_opt_minimize(objective: Callable[[np.ndarray], float], bounds, budget: int,
                       seed: int = 0, *, x0=None, n_initial: int = N_INITIAL_DESIGN,
                       callback: Callable[[int, Evaluation], None] | None = None) -> BayesOptResult:
    """Minimize a noisy black-box function over a box.

    Parameters
    ----------
    objective : callable
        Maps a point of the box to a float. Non-finite values are replaced by a
        large finite penalty before reaching the surrogate.
    bounds : (d, 2) array_like
        Lower and upper limits per coordinate.
    budget : int
        Total number of objective evaluations.
    x0 : array_like, optional
        Initial guess, evaluated first and counted in the initial design.
    """
    box = np.asarray(bounds, dtype=float).reshape(-1, 2)
    d = box.shape[0]
    if budget < 1:
        raise BudgetTooSmallError("budget must be >= 1")
    if np.any(box[:, 1] < box[:, 0]):
        raise ValueError("every upper bound must be >= the lower bound")
    lo, width = box[:, 0], box[:, 1] - box[:, 0]
    safe_width = np.where(width > 0, width, 1.0)
    rng = np.random.default_rng(seed)

    def to_unit(x):
        return (np.asarray(x, dtype=float) - lo) / safe_width

    def from_unit(u):
        return np.clip(lo + np.clip(u, 0.0, 1.0) * width, box[:, 0], box[:, 1])

    history: list[Evaluation] = []
    worst = [None]

    def evaluate(x, stage):
        try:
            raw = float(objective(x))
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            log.debug("objective failed at %s: %s", x, exc)
            raw = math.nan
        if math.isfinite(raw):
            worst[0] = raw if worst[0] is None else max(worst[0], raw)
            value = raw
        else:
            value = max(1e6, 10.0 * abs(worst[0])) if worst[0] is not None else 1e6
        ev = Evaluation(np.array(x, dtype=float), value, raw, stage)
        history.append(ev)
        if callback is not None:
            callback(len(history) - 1, ev)
        return ev

    n_init = min(n_initial, budget)
    design = []
    if x0 is not None:
        design.append(("guess", from_unit(to_unit(x0))))
    n_qmc = n_init - len(design)
    if n_qmc > 0:
        sampler = qmc.LatinHypercube(d=d, seed=rng)
        for u in sampler.random(n_qmc):
            design.append(("initial", from_unit(u)))
    for stage, x in design[:n_init]:
        evaluate(x, stage)

    while len(history) < budget:
        u_hist = np.array([to_unit(e.x) for e in history])
        y_hist = np.array([e.value for e in history])
        i_best = int(np.argmin(y_hist))
        cand = rng.random((N_EI_CANDIDATES, d))
        local = u_hist[i_best] + 0.05 * rng.standard_normal((N_LOCAL_CANDIDATES, d))
        cand = np.clip(np.vstack([cand, local]), 0.0, 1.0)
        try:
            surrogate = _Surrogate(u_hist, y_hist)
            ei = surrogate.expected_improvement(cand)
            u_next = cand[int(np.argmax(ei))]
        except FactorizationError:
            u_next = cand[0]
        evaluate(from_unit(u_next), "ei")

    values = np.array([e.value for e in history])
    return BayesOptResult(history[int(np.argmin(values))].x.copy(), history)


# --- the learning loop -------------------------------------------------------------

@dataclass
class LearnResult:
    hp: HyperParams
    history: list[Evaluation]
    search_space: SearchSpace
    default_objective: float = field(default=math.nan)

    def history_rows(self) -> list[list]:
        return [[i, *e.x.tolist(), e.value] for i, e in enumerate(self.history)]


def learn_hyperparams(obs: ObservationSet, cv_config: CvConfig, fit_config: FitConfig,
                      base_hp: HyperParams | None = None) -> LearnResult:
    """Pick kernel hyperparameters minimizing the randomized CV objective.

    The search starts from ``base_hp`` (default: ``fit_config.hp``), which is
    the first point evaluated. Evaluation ``i`` draws its partitions from a
    generator seeded by ``(cv_config.seed, i)``.
    """
    if len(obs) < 8:
        raise TooFewError("learn_hyperparams needs at least 8 observations")
    base = base_hp if base_hp is not None else fit_config.hp
    space = cv_config.search_space or default_search_space(
        base, include_noise=cv_config.include_noise)
    try:
        x0 = encode_params(base, space)
    except OutOfBoundsError:
        log.info("base hyperparameters lie outside the search space; not seeding the design")
        x0 = None
    counter = [0]

    def objective(x):
        hp = decode_params(x, space)
        rng = np.random.default_rng(derive_seed(cv_config.seed, "cv", counter[0]))
        counter[0] += 1
        return empirical_cv_objective(hp, obs, cv_config, rng, fit_config=fit_config)

    res = bayes_opt_minimize(objective, space.box(), cv_config.budget,
                             seed=derive_seed(cv_config.seed, "bayes_opt"),
                             x0=x0, n_initial=cv_config.n_initial)
    return LearnResult(decode_params(res.x_best, space), res.history, space,
                       default_objective=res.history[0].raw if x0 is not None else math.nan)
