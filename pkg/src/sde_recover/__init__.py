"""Drift and volatility recovery for stochastic differential equations.

Gaussian-process priors are placed on the drift and the volatility of an
Euler-Maruyama discretized SDE; the MAP estimate of the volatility at the
sample points is found by minimizing a profile loss, the drift follows in
closed form, and kernel hyperparameters are tuned by randomized
cross-validation with Bayesian optimization.
"""
__version__ = "0.1.0"

from .estimator import FitConfig, FitResult, fit, fit_multivariate
from .evaluation import ExperimentSpec, run_experiment, time_discretization_sweep
from .hyperlearn import CvConfig, learn_hyperparams
from .kernels import HyperParams, KernelSpec, default_hyperparams
from .simulate import ProcessSpec, euler_maruyama, to_observations

__all__ = [
    "CvConfig", "ExperimentSpec", "FitConfig", "FitResult", "HyperParams", "KernelSpec",
    "ProcessSpec", "default_hyperparams", "euler_maruyama", "fit", "fit_multivariate",
    "learn_hyperparams", "run_experiment", "time_discretization_sweep", "to_observations",
]
