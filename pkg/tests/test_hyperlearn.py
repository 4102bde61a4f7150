import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sde_recover.estimator import FitConfig, NEWTON_ARMIJO, increment_nll, fit
from sde_recover.hyperlearn import (BudgetTooSmallError, CvConfig, TooFewError, bayes_opt_minimize,
                                    cv_loss, derive_seed, empirical_cv_objective,
                                    learn_hyperparams, random_partition)
from sde_recover.kernels import ParamBound, SearchSpace, default_hyperparams
from sde_recover.simulate import ProcessSpec, euler_maruyama, to_observations


def expvol_obs(n, seed=0):
    return to_observations(euler_maruyama(ProcessSpec.exp_decay_vol(-5.0, 1.0), 0.0, 0.01, n,
                                          seed=seed))


# --- partitions ----------------------------------------------------------------------------

@given(st.integers(4, 200), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_partition_is_disjoint_cover(n, seed):
    part = random_partition(n, np.random.default_rng(seed))
    assert len(part.valid_idx) == n // 2
    both = np.concatenate([part.train_idx, part.valid_idx])
    np.testing.assert_array_equal(np.sort(both), np.arange(n))


def test_partition_minimal_size():
    part = random_partition(4, np.random.default_rng(0))
    assert len(part.train_idx) == len(part.valid_idx) == 2
    with pytest.raises(TooFewError):
        random_partition(3, np.random.default_rng(0))


def test_partition_odd_size():
    part = random_partition(5, np.random.default_rng(0))
    assert sorted([len(part.train_idx), len(part.valid_idx)]) == [2, 3]


def test_partition_uniform_membership():
    rng = np.random.default_rng(0)
    counts = np.zeros(6)
    for _ in range(1000):
        counts[random_partition(6, rng).valid_idx] += 1
    assert np.all(np.abs(counts / 1000 - 0.5) < 0.05)


def test_partition_deterministic():
    a = random_partition(50, np.random.default_rng(9))
    b = random_partition(50, np.random.default_rng(9))
    np.testing.assert_array_equal(a.valid_idx, b.valid_idx)


# --- CV objective --------------------------------------------------------------------------

def test_cv_loss_is_validation_nll():
    obs = expvol_obs(40)
    hp = default_hyperparams(obs.X, obs.dt)
    cfg = FitConfig(hp, gd_max_iters=300)
    part = random_partition(40, np.random.default_rng(1))
    res = fit(obs.subset(part.train_idx), cfg)
    valid = obs.subset(part.valid_idx)
    expected = np.sum(increment_nll(valid.Y, res.predict_drift(valid.X).mean,
                                    res.predict_sigma(valid.X), valid.dt, hp.lam))
    assert cv_loss(hp, part, obs, cfg) == pytest.approx(expected, rel=1e-12)


def test_cv_objective_is_mean_over_partitions():
    obs = expvol_obs(40)
    hp = default_hyperparams(obs.X, obs.dt)
    cfg = FitConfig(hp, gd_max_iters=200)
    parts = [random_partition(40, np.random.default_rng(s)) for s in range(3)]
    expected = np.mean([cv_loss(hp, p, obs, cfg) for p in parts])
    got = empirical_cv_objective(hp, obs, CvConfig(m_partitions=3), fit_config=cfg,
                                 partitions=parts)
    assert got == pytest.approx(expected, rel=1e-12)


def test_cv_objective_thread_count_does_not_change_value(monkeypatch):
    obs = expvol_obs(40)
    hp = default_hyperparams(obs.X, obs.dt)
    cfg = FitConfig(hp, gd_max_iters=200)
    cv = CvConfig(m_partitions=3)
    monkeypatch.setenv("SDE_RECOVER_THREADS", "1")
    a = empirical_cv_objective(hp, obs, cv, np.random.default_rng(2), fit_config=cfg)
    monkeypatch.setenv("SDE_RECOVER_THREADS", "3")
    b = empirical_cv_objective(hp, obs, cv, np.random.default_rng(2), fit_config=cfg)
    assert a == b


def test_cv_loss_zero_contribution_point():
    # Y = 0, predicted drift 0 and unit total variance: the point contributes nothing
    assert increment_nll(0.0, 0.0, 1.0, 1.0, 0.0) == 0.0


def test_cv_objective_single_partition_is_one_draw():
    obs = expvol_obs(30)
    hp = default_hyperparams(obs.X, obs.dt)
    cfg = FitConfig(hp, gd_max_iters=100)
    part = random_partition(30, np.random.default_rng(4))
    got = empirical_cv_objective(hp, obs, CvConfig(), np.random.default_rng(4), fit_config=cfg)
    assert got == cv_loss(hp, part, obs, cfg)


def test_cv_objective_variance_shrinks_with_more_partitions():
    obs = expvol_obs(40)
    hp = default_hyperparams(obs.X, obs.dt)
    cfg = FitConfig(hp, gd_max_iters=100)

    def spread(m):
        vals = [empirical_cv_objective(hp, obs, CvConfig(m_partitions=m),
                                       np.random.default_rng(100 + r), fit_config=cfg)
                for r in range(20)]
        return np.var(vals)

    assert spread(10) < spread(1)


def test_cv_config_defaults_per_optimizer():
    assert CvConfig.for_optimizer(NEWTON_ARMIJO).m_partitions == 10
    assert CvConfig.for_optimizer(NEWTON_ARMIJO).budget == 150
    gd = CvConfig.for_optimizer("NormBoundedGD")
    assert (gd.m_partitions, gd.budget) == (1, 75)
    with pytest.raises(BudgetTooSmallError):
        CvConfig(budget=0)


def test_cv_config_roundtrip():
    obs = expvol_obs(20)
    hp = default_hyperparams(obs.X, obs.dt)
    space = SearchSpace(hp, (ParamBound("vol", "lengthscale", -2.0, 1.0),))
    cv = CvConfig(m_partitions=2, budget=5, seed=3, search_space=space)
    assert CvConfig.from_dict(cv.to_dict()) == cv


# --- Bayesian optimization -----------------------------------------------------------------

def test_bo_one_dimensional_quadratic():
    res = bayes_opt_minimize(lambda x: (x[0] - 2.0) ** 2, [[0.0, 5.0]], 30, seed=0)
    assert len(res.history) == 30
    assert abs(res.x_best[0] - 2.0) < 0.2


def test_bo_two_dimensional_bowl():
    res = bayes_opt_minimize(lambda x: float(np.sum((x - np.array([1.0, -1.0])) ** 2)),
                             [[-3.0, 3.0], [-3.0, 3.0]], 60, seed=1)
    assert res.best_value < 0.1


def test_bo_deterministic():
    f = lambda x: math.sin(3 * x[0]) + (x[0] - 1) ** 2
    a = bayes_opt_minimize(f, [[-2.0, 3.0]], 20, seed=5)
    b = bayes_opt_minimize(f, [[-2.0, 3.0]], 20, seed=5)
    assert [e.value for e in a.history] == [e.value for e in b.history]


def test_bo_budget_one_evaluates_guess():
    res = bayes_opt_minimize(lambda x: float(x[0]), [[0.0, 1.0]], 1, x0=[0.3])
    assert len(res.history) == 1
    assert res.x_best[0] == pytest.approx(0.3)


def test_bo_constant_objective():
    res = bayes_opt_minimize(lambda x: 1.0, [[0.0, 1.0], [0.0, 1.0]], 15, seed=0)
    assert len(res.history) == 15
    assert res.best_value == 1.0


def test_bo_penalizes_nonfinite():
    def f(x):
        return math.inf if x[0] > 0.5 else (x[0] - 0.2) ** 2
    res = bayes_opt_minimize(f, [[0.0, 1.0]], 20, seed=0)
    assert all(math.isfinite(e.value) for e in res.history)
    assert res.x_best[0] <= 0.5


def test_bo_best_so_far_monotone():
    res = bayes_opt_minimize(lambda x: (x[0] - 0.7) ** 2, [[0.0, 1.0]], 15, seed=2)
    assert np.all(np.diff(res.best_so_far()) <= 0)


def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, "cv", 1) == derive_seed(0, "cv", 1)
    assert derive_seed(0, "cv", 1) != derive_seed(0, "cv", 2)
    assert 0 <= derive_seed(123, "x") < 2**63


# --- learning loop -------------------------------------------------------------------------

def test_learn_first_evaluation_is_default():
    obs = expvol_obs(40)
    hp = default_hyperparams(obs.X, obs.dt)
    cfg = FitConfig(hp, gd_max_iters=200)
    out = learn_hyperparams(obs, CvConfig(budget=4, n_initial=3, seed=1), cfg)
    assert len(out.history) == 4
    assert out.history[0].stage == "guess"
    assert out.hp.lam == hp.lam
    best = min(e.value for e in out.history)
    assert best <= out.default_objective


def test_learned_beats_default_on_pinned_partitions():
    obs = expvol_obs(200, seed=2)
    hp = default_hyperparams(obs.X, obs.dt)
    cfg = FitConfig(hp, gd_max_iters=500)
    out = learn_hyperparams(obs, CvConfig(budget=12, seed=2), cfg)
    parts = [random_partition(200, np.random.default_rng(s)) for s in range(5)]
    cv = CvConfig(m_partitions=5)
    learned = empirical_cv_objective(out.hp, obs, cv, fit_config=cfg, partitions=parts)
    default = empirical_cv_objective(hp, obs, cv, fit_config=cfg, partitions=parts)
    assert learned <= default


def test_learn_deterministic():
    obs = expvol_obs(40)
    cfg = FitConfig(default_hyperparams(obs.X, obs.dt), gd_max_iters=100)
    a = learn_hyperparams(obs, CvConfig(budget=4, n_initial=3, seed=9), cfg)
    b = learn_hyperparams(obs, CvConfig(budget=4, n_initial=3, seed=9), cfg)
    assert a.hp == b.hp


def test_learn_budget_one_returns_default():
    obs = expvol_obs(40)
    hp = default_hyperparams(obs.X, obs.dt)
    out = learn_hyperparams(obs, CvConfig(budget=1), FitConfig(hp, gd_max_iters=100))
    for a, b in [(out.hp.drift_kernel, hp.drift_kernel), (out.hp.vol_kernel, hp.vol_kernel)]:
        for k in a.params:
            assert a.params[k] == pytest.approx(b.params[k], rel=1e-9)


def test_learn_respects_custom_space_excluding_base():
    obs = expvol_obs(40)
    hp = default_hyperparams(obs.X, obs.dt)
    space = SearchSpace(hp, (ParamBound("vol", "lengthscale", 2.0, 3.0),))
    out = learn_hyperparams(obs, CvConfig(budget=3, n_initial=2, search_space=space),
                            FitConfig(hp, gd_max_iters=100))
    assert 100.0 <= out.hp.vol_kernel.params["lengthscale"] <= 1000.0
    assert math.isnan(out.default_objective)


def test_learn_too_few_points():
    obs = expvol_obs(6)
    hp = default_hyperparams(obs.X, obs.dt)
    with pytest.raises(TooFewError):
        learn_hyperparams(obs, CvConfig(budget=2), FitConfig(hp))
