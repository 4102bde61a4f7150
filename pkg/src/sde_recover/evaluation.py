"""Metrics and experiment orchestration.

An experiment simulates one trajectory, trains on the first ``n_train``
increments and tests on the following ``n_test``, and scores three methods:
the GP regression benchmark, the MAP estimator with default kernel
parameters, and the MAP estimator with cross-validated parameters.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .benchmark import BenchmarkSearch, fit_benchmark, predict_benchmark
from .estimator import FitConfig, fit, increment_nll
from .hyperlearn import CvConfig, derive_seed, learn_hyperparams
from .kernels import MATERN52, HyperParams, default_hyperparams
from .numerics import DimensionMismatchError
from .simulate import (ObservationSet, ProcessSpec, drift_of, euler_maruyama, subsample,
                       to_observations, vol_of)

log = logging.getLogger(__name__)

BENCHMARK = "Benchmark"
NON_LEARNED = "NonLearnedKernel"
LEARNED = "LearnedKernel"
METHODS = (BENCHMARK, NON_LEARNED, LEARNED)


class ZeroTruthNormError(ValueError):
    pass


def likelihood_metric(f_pred, sigma_pred, test_obs: ObservationSet, lam: float) -> float:
    """Mean per-point negative log-likelihood of the test increments."""
    f_pred = np.asarray(f_pred, dtype=float).ravel()
    sigma_pred = np.asarray(sigma_pred, dtype=float).ravel()
    n = len(test_obs)
    if f_pred.shape[0] != n or sigma_pred.shape[0] != n:
        raise DimensionMismatchError(
            f"predictions of length {f_pred.shape[0]}/{sigma_pred.shape[0]} for {n} test points")
    return float(np.mean(increment_nll(test_obs.Y, f_pred, sigma_pred, test_obs.dt, lam)))


def relative_errors(f_true, sigma_true, f_pred, sigma_pred) -> tuple[float, float]:
    """Relative Euclidean errors of drift and volatility.

    Volatility is only identified up to sign, so magnitudes are compared.
    """
    f_true = np.asarray(f_true, dtype=float)
    s_true = np.abs(np.asarray(sigma_true, dtype=float))
    nf, ns = np.linalg.norm(f_true), np.linalg.norm(s_true)
    if nf == 0 or ns == 0:
        raise ZeroTruthNormError("true drift or volatility has zero norm")
    df = np.linalg.norm(f_true - np.asarray(f_pred, dtype=float)) / nf
    ds = np.linalg.norm(s_true - np.abs(np.asarray(sigma_pred, dtype=float))) / ns
    return float(df), float(ds)


@dataclass
class MetricRow:
    method: str
    likelihood: float
    delta_f: float
    delta_sigma: float
    runtime_seconds: float
    seed: int
    k: int = 1
    lam: float = float("nan")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ExperimentSpec:
    process: ProcessSpec
    x0: float = 0.0
    dt: float = 0.01
    n_train: int = 500
    n_test: int = 500
    drift_family: str = MATERN52
    vol_family: str = MATERN52
    fit_config: Mapping = field(default_factory=dict)  # FitConfig fields other than hp
    cv_config: Mapping = field(default_factory=dict)  # CvConfig fields other than seed
    benchmark: Mapping = field(default_factory=dict)  # BenchmarkSearch fields other than seed
    lam: float | None = None  # base lambda; default 0.01 * dt
    gamma: float = 1e-4
    subsample_k: int = 1
    seed: int = 0
    methods: tuple[str, ...] = METHODS
    label: str = ""

    def __post_init__(self):
        if self.n_train < 2 or self.n_test < 2:
            raise ValueError("n_train and n_test must be >= 2")
        if self.subsample_k < 1:
            raise ValueError("subsample_k must be >= 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        object.__setattr__(self, "methods", tuple(self.methods))

    def replace(self, **changes) -> "ExperimentSpec":
        return replace(self, **changes)

    @property
    def base_lambda(self) -> float:
        return 0.01 * self.dt if self.lam is None else self.lam

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["process"] = self.process.to_dict()
        out["fit_config"] = dict(self.fit_config)
        out["cv_config"] = dict(self.cv_config)
        out["benchmark"] = dict(self.benchmark)
        out["methods"] = list(self.methods)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentSpec":
        kw = dict(data)
        kw["process"] = ProcessSpec.from_dict(kw["process"])
        if "methods" in kw:
            kw["methods"] = tuple(kw["methods"])
        return cls(**kw)


@dataclass
class CellPrediction:
    x: np.ndarray
    f_true: np.ndarray
    f_pred: np.ndarray
    sigma_true: np.ndarray
    sigma_pred: np.ndarray

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "f_true", "f_pred", "sigma_true", "sigma_pred"])
        for row in zip(self.x, self.f_true, self.f_pred, self.sigma_true, self.sigma_pred):
            w.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rows: list[MetricRow]
    predictions: dict[str, CellPrediction]
    hyperparams: dict[str, dict]

    def row(self, method: str) -> MetricRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_dict(self) -> dict:
        return {
            "experiment": self.spec.to_dict(),
            "rows": [r.to_dict() for r in self.rows],
            "hyperparams": self.hyperparams,
        }


def split_observations(spec: ExperimentSpec, k: int | None = None):
    """Simulate, subsample by ``k`` and split chronologically into train/test."""
    k = spec.subsample_k if k is None else k
    n_obs = spec.n_train + spec.n_test
    traj = euler_maruyama(spec.process, spec.x0, spec.dt, k * n_obs, spec.seed)
    obs = to_observations(subsample(traj, k))
    train = obs.subset(np.arange(spec.n_train))
    test = obs.subset(np.arange(spec.n_train, n_obs))
    return train, test


def _fit_config(spec: ExperimentSpec, hp: HyperParams) -> FitConfig:
    return FitConfig(hp=hp, **dict(spec.fit_config))


def run_experiment(spec: ExperimentSpec, k: int | None = None,
                   lam: float | None = None) -> ExperimentResult:
    """Score every method in ``spec.methods`` on one simulated trajectory.

    ``k`` overrides ``spec.subsample_k``; ``lam`` overrides the base lambda.
    """
    k = spec.subsample_k if k is None else k
    lam = spec.base_lambda if lam is None else lam
    train, test = split_observations(spec, k)
    f_true = drift_of(spec.process, test.X)
    s_true = vol_of(spec.process, test.X)
    rows, preds, hps = [], {}, {}
    base_hp = default_hyperparams(train.X, train.dt, spec.drift_family, spec.vol_family,
                                  lam=lam, gamma=spec.gamma)
    for method in spec.methods:
        t0 = time.perf_counter()
        method_seed = derive_seed(spec.seed, spec.process.family, method)
        if method == BENCHMARK:
            search = BenchmarkSearch(**{**dict(spec.benchmark), "seed": method_seed})
            model = fit_benchmark(train.X, train.Y, spec.drift_family, search)
            bp = predict_benchmark(model, test.X, test.dt)
            f_pred, s_pred = bp.drift, bp.volatility
            hps[method] = model.to_dict()
        else:
            hp = base_hp
            fit_config = _fit_config(spec, hp)
            if method == LEARNED:
                cv = CvConfig.for_optimizer(fit_config.optimizer, seed=method_seed)
                cv = cv.replace(**dict(spec.cv_config))
                hp = learn_hyperparams(train, cv, fit_config).hp
                fit_config = fit_config.replace(hp=hp)
            result = fit(train, fit_config)
            f_pred = result.predict_drift(test.X).mean
            s_pred = result.predict_sigma(test.X)
            hps[method] = hp.to_dict()
        elapsed = time.perf_counter() - t0
        lik = likelihood_metric(f_pred, s_pred, test, lam)
        df, ds = relative_errors(f_true, s_true, f_pred, s_pred)
        rows.append(MetricRow(method, lik, df, ds, elapsed, spec.seed, k, lam))
        preds[method] = CellPrediction(test.X, f_true, f_pred, s_true, s_pred)
        log.info("%s k=%d %s: L=%.4f df=%.4f ds=%.4f (%.1fs)", spec.label or spec.process.family,
                 k, method, lik, df, ds, elapsed)
    return ExperimentResult(spec, rows, preds, hps)


@dataclass
class SweepResult:
    spec: ExperimentSpec
    results: dict[int, ExperimentResult]
    base_lambda: float

    @property
    def rows(self) -> list[MetricRow]:
        return [r for k in sorted(self.results) for r in self.results[k].rows]

    def lambdas(self) -> dict[int, float]:
        return {k: res.rows[0].lam for k, res in self.results.items()}

    def to_dict(self) -> dict:
        return {
            "experiment": self.spec.to_dict(),
            "base_lambda": self.base_lambda,
            "rows": [r.to_dict() for r in self.rows],
        }


def time_discretization_sweep(spec: ExperimentSpec, k_list: Sequence[int]) -> SweepResult:
    """Re-run the experiment on every ``k``-th sample with ``lambda_k = k * lambda``."""
    base = spec.base_lambda
    results = {}
    for k in k_list:
        if k < 1:
            raise ValueError("k must be >= 1")
        results[int(k)] = run_experiment(spec, k=int(k), lam=k * base)
    return SweepResult(spec, results, base)


# --- tables --------------------------------------------------------------------

TABLE_HEADER = ["label", "k", "method", "likelihood", "delta_f", "delta_sigma", "lambda",
                "runtime_seconds", "seed"]


def rows_to_table_csv(labelled_rows: Sequence[tuple[str, MetricRow]], path=None, *,
                      include_runtime: bool = True) -> str:
    """Table with metrics rounded to three decimals; ``lambda`` is written exactly."""
    header = TABLE_HEADER if include_runtime else [h for h in TABLE_HEADER
                                                   if h != "runtime_seconds"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for label, r in labelled_rows:
        row = [label, r.k, r.method, f"{r.likelihood:.3f}", f"{r.delta_f:.3f}",
               f"{r.delta_sigma:.3f}", repr(r.lam), f"{r.runtime_seconds:.2f}", r.seed]
        if not include_runtime:
            del row[7]
        w.writerow(row)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def reference_suite(n: int = 300, seed: int = 0, **overrides) -> list[ExperimentSpec]:
    """The catalog experiments with their published parameters at ``n`` train/test points.

    The exponential-decay process is configured with a mean-reverting drift
    (``mu = -5``); OU uses reversion rate ``theta = 5``.
    """
    common = dict(n_train=n, n_test=n, seed=seed, **overrides)
    return [
        ExperimentSpec(ProcessSpec.exp_decay_vol(-5.0, 1.0), x0=0.0, dt=0.01,
                       label="exp_decay_b1", **common),
        ExperimentSpec(ProcessSpec.exp_decay_vol(-5.0, 0.5), x0=0.0, dt=0.01,
                       label="exp_decay_b0.5", **common),
        ExperimentSpec(ProcessSpec.trigonometric(1.0), x0=0.0, dt=0.01,
                       label="trig_dt0.01", **common),
        ExperimentSpec(ProcessSpec.trigonometric(0.5), x0=0.0, dt=0.001,
                       label="trig_dt0.001", **common),
        ExperimentSpec(ProcessSpec.gbm(2.0, 1.0), x0=1.0, dt=0.001,
                       drift_family="Linear", vol_family="Linear", label="gbm_linear", **common),
        ExperimentSpec(ProcessSpec.gbm(2.0, 1.0), x0=1.0, dt=0.001, label="gbm_matern", **common),
        ExperimentSpec(ProcessSpec.ou(5.0, 1.0), x0=1.0, dt=0.001, label="ou_matern", **common),
        ExperimentSpec(ProcessSpec.ou(5.0, 1.0), x0=1.0, dt=0.001,
                       drift_family="Linear", vol_family="Linear", label="ou_linear", **common),
    ]


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")
