import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import approx_fprime

from conftest import random_instance
from sde_recover.estimator import (LITERAL_QUAD_VAR, NEWTON_ARMIJO, NORM_BOUNDED_GD, RAW,
                                   FitConfig, MapProblem, NonFiniteLossError, coupled_row_loss,
                                   drift_given_sigma, drift_posterior, fit, fit_multivariate,
                                   increment_nll, init_sigma, map_loss, newton_armijo,
                                   norm_bounded_gd, raw_quadratic_variation, sigma_posterior,
                                   sigma_profile_grad, sigma_profile_loss, smooth_sigma)
from sde_recover.kernels import HyperParams, KernelSpec, default_hyperparams, gram
from sde_recover.numerics import DimensionMismatchError
from sde_recover.simulate import (ObservationSet, ProcessSpec, euler_maruyama,
                                  stack_trajectories, to_observations)


def central_diff(fun, x, h=1e-6):
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def expvol_obs(n, seed=0):
    tr = euler_maruyama(ProcessSpec.exp_decay_vol(-5.0, 1.0), 0.0, 0.01, n, seed=seed)
    return to_observations(tr)


# --- closed forms --------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_profile_loss_equals_map_loss_at_optimal_drift(seed):
    obs, hp, sigma = random_instance(12, seed)
    f_star = drift_given_sigma(sigma, obs, hp)
    assert sigma_profile_loss(sigma, obs, hp) == pytest.approx(map_loss(f_star, sigma, obs, hp),
                                                               rel=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    obs, hp, sigma = random_instance(10, seed)
    g = sigma_profile_grad(sigma, obs, hp)
    fd = central_diff(lambda s: sigma_profile_loss(s, obs, hp), sigma)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_hessian_matches_finite_differences(seed):
    obs, hp, sigma = random_instance(8, seed)
    problem = MapProblem(obs, hp)
    h = problem.hessian(sigma)
    fd = np.column_stack([central_diff(lambda s: problem.grad(s)[i], sigma) for i in range(8)])
    np.testing.assert_allclose(h, fd.T, rtol=1e-4, atol=1e-4 * np.max(np.abs(h)))


def test_gradient_at_zero_sigma_is_prior_free():
    obs, hp, _ = random_instance(6, 1)
    np.testing.assert_array_equal(sigma_profile_grad(np.zeros(6), obs, hp), 0.0)


def test_dimension_mismatch():
    obs, hp, sigma = random_instance(6, 1)
    with pytest.raises(DimensionMismatchError):
        sigma_profile_loss(sigma[:-1], obs, hp)


@pytest.mark.parametrize("seed", range(3))
def test_drift_is_stationary_point_of_map_loss(seed):
    obs, hp, sigma = random_instance(10, seed)
    f_star = drift_given_sigma(sigma, obs, hp)
    g = approx_fprime(f_star, lambda f: map_loss(f, sigma, obs, hp), 1e-7)
    assert np.linalg.norm(g) < 1e-4 * max(1.0, abs(map_loss(f_star, sigma, obs, hp)))
    rng = np.random.default_rng(seed)
    best = map_loss(f_star, sigma, obs, hp)
    for _ in range(20):
        assert map_loss(f_star + rng.normal(scale=0.1, size=10), sigma, obs, hp) > best


def test_drift_posterior_at_training_points_equals_drift():
    obs, hp, sigma = random_instance(10, 4)
    post = drift_posterior(obs.X, sigma, obs, hp)
    np.testing.assert_allclose(post.mean, drift_given_sigma(sigma, obs, hp), rtol=1e-10)
    assert np.all(post.variance >= 0)


def test_drift_posterior_homoscedastic_oracle():
    rng = np.random.default_rng(3)
    n = 15
    x = rng.uniform(-2, 2, n)
    y = rng.normal(size=n)
    obs = ObservationSet(x, y, np.ones(n))
    hp = HyperParams(KernelSpec.matern52(1.3, 0.7), KernelSpec.matern52(1.0, 1.0), lam=0.05)
    sigma = np.full(n, 0.4)
    c = 0.4 ** 2 + 0.05
    xs = np.linspace(-2, 2, 7)
    K = gram(hp.drift_kernel, x)
    Kinv = np.linalg.inv(K + c * np.eye(n))
    kx = gram(hp.drift_kernel, xs, x)
    post = drift_posterior(xs, sigma, obs, hp)
    np.testing.assert_allclose(post.mean, kx @ Kinv @ y, atol=1e-8)
    np.testing.assert_allclose(post.variance, 1.3 - np.sum(kx @ Kinv * kx, axis=1), atol=1e-8)


def test_smoothing_gamma_zero_is_identity():
    obs, hp, sigma = random_instance(8, 2)
    np.testing.assert_array_equal(smooth_sigma(sigma, obs, hp.replace(gamma=0.0)), sigma)


def test_smoothing_matches_direct_formula():
    obs, hp, sigma = random_instance(8, 2)
    G = gram(hp.vol_kernel, obs.X)
    direct = G @ np.linalg.solve(G + hp.gamma * np.eye(8), sigma)
    np.testing.assert_allclose(smooth_sigma(sigma, obs, hp), direct, rtol=1e-8)
    np.testing.assert_allclose(sigma_posterior(obs.X, sigma, obs, hp), direct, rtol=1e-8)


def test_smoothing_constant_under_large_lengthscale():
    obs, hp, _ = random_instance(8, 2)
    hp = hp.replace(vol_kernel=KernelSpec.matern52(1.0, 1e3))
    out = smooth_sigma(np.full(8, 0.7), obs, hp)
    np.testing.assert_allclose(out, 0.7, rtol=1e-2)


def test_quadratic_variation_modes():
    obs = ObservationSet([0.0, 1.0], [0.2, -0.4], [0.04, 0.04])
    np.testing.assert_allclose(raw_quadratic_variation(obs), [1.0, 2.0])
    np.testing.assert_allclose(raw_quadratic_variation(obs, LITERAL_QUAD_VAR), [1.0, 4.0])


def test_init_sigma_is_smoothed():
    obs, hp, _ = random_instance(8, 0)
    np.testing.assert_allclose(init_sigma(obs, hp),
                               smooth_sigma(raw_quadratic_variation(obs), obs, hp))


# --- optimizers ----------------------------------------------------------------------------

def quadratic(x):
    return float(x @ x), 2.0 * x


def test_gd_step_length_is_percent_of_norm():
    res = norm_bounded_gd(quadratic, np.array([3.0, 4.0]), p_init=10.0, max_iters=1)
    assert np.linalg.norm(res.x) == pytest.approx(4.5)


def test_gd_stops_at_floor():
    res = norm_bounded_gd(lambda x: (float(np.sum((x - 1) ** 2)), 2 * (x - 1)),
                          np.array([0.5]), p_init=1.0, p_floor=1e-3)
    assert res.reason == "p_floor"
    assert res.fun < 1e-4


def test_gd_trace_strictly_decreasing():
    obs = expvol_obs(100)
    hp = default_hyperparams(obs.X, obs.dt)
    res = fit(obs, FitConfig(hp, gd_max_iters=3000))
    assert np.all(np.diff(res.loss_trace) < 0)


def test_gd_raw_coordinates_descend():
    obs = expvol_obs(60)
    hp = default_hyperparams(obs.X, obs.dt)
    res = fit(obs, FitConfig(hp, gd_max_iters=500, gd_coordinates=RAW))
    assert np.all(np.diff(res.loss_trace) < 0)


def test_newton_converges_on_quadratic():
    res = newton_armijo(quadratic, lambda x: 2 * np.eye(2), np.array([3.0, -1.0]))
    np.testing.assert_allclose(res.x, 0.0, atol=1e-12)
    assert res.iterations == 1


def test_newton_and_gd_agree_on_small_problem():
    obs = expvol_obs(60, seed=3)
    hp = default_hyperparams(obs.X, obs.dt)
    newton = fit(obs, FitConfig(hp, optimizer=NEWTON_ARMIJO))
    gd = fit(obs, FitConfig(hp, optimizer=NORM_BOUNDED_GD))
    assert np.all(np.diff(newton.loss_trace) < 0)
    assert gd.final_loss == pytest.approx(newton.final_loss, abs=1e-3 * abs(newton.final_loss))


def test_nonfinite_start_raises():
    with pytest.raises(NonFiniteLossError):
        norm_bounded_gd(lambda x: (math.nan, x), np.ones(2))


def test_config_roundtrip():
    obs = expvol_obs(20)
    cfg = FitConfig(default_hyperparams(obs.X, obs.dt), optimizer=NEWTON_ARMIJO)
    assert FitConfig.from_dict(cfg.to_dict()) == cfg


def test_fit_too_few_points():
    obs = ObservationSet([0.0], [0.1], [0.01])
    with pytest.raises(ValueError):
        fit(obs, FitConfig(HyperParams(KernelSpec.matern52(1, 1), KernelSpec.matern52(1, 1), 1e-4)))


# --- multivariate --------------------------------------------------------------------------

def test_multivariate_equals_per_dimension_fits():
    a = euler_maruyama(ProcessSpec.ou(5.0, 1.0), 1.0, 0.01, 40, seed=1)
    b = euler_maruyama(ProcessSpec.ou(5.0, 1.0), -1.0, 0.01, 40, seed=2)
    obs = to_observations(stack_trajectories([a, b]))
    hp = default_hyperparams(obs.X, obs.dt)
    cfg = FitConfig(hp, gd_max_iters=400)
    joint = fit_multivariate(obs, cfg)
    for i in range(2):
        single = fit(obs.component(i), cfg)
        assert joint[i].sigma_bar.tobytes() == single.sigma_bar.tobytes()
        assert joint[i].f_bar.tobytes() == single.f_bar.tobytes()


def test_coupled_loss_single_column_equals_map_loss():
    obs, hp, sigma = random_instance(9, 5)
    f = drift_given_sigma(sigma, obs, hp)
    assert coupled_row_loss(f, sigma, obs, hp) == pytest.approx(map_loss(f, sigma, obs, hp),
                                                                rel=1e-12)


def test_coupled_loss_zero_column_is_neutral():
    obs, hp, sigma = random_instance(9, 5)
    f = drift_given_sigma(sigma, obs, hp)
    row = np.column_stack([sigma, np.zeros(9)])
    assert coupled_row_loss(f, row, obs, hp) == pytest.approx(map_loss(f, sigma, obs, hp),
                                                              rel=1e-12)


@given(st.floats(-3, 3), st.floats(-2, 2), st.floats(0.05, 3), st.floats(1e-3, 1))
@settings(max_examples=50, deadline=None)
def test_increment_nll_matches_gaussian(y, f, sigma, dt):
    from scipy.stats import norm
    lam = 1e-4
    v = sigma ** 2 * dt + lam
    expected = -norm.logpdf(y, loc=f * dt, scale=math.sqrt(v)) - 0.5 * math.log(2 * math.pi)
    assert increment_nll(y, f, sigma, dt, lam) == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_multivariate_single_dimension_is_fit():
    obs = expvol_obs(30)
    cfg = FitConfig(default_hyperparams(obs.X, obs.dt), gd_max_iters=200)
    (only,) = fit_multivariate(obs, cfg)
    assert only.sigma_bar.tobytes() == fit(obs, cfg).sigma_bar.tobytes()


def test_multivariate_three_dimensions():
    trs = [euler_maruyama(ProcessSpec.ou(5.0, 1.0), 0.5, 0.01, 25, seed=s) for s in range(3)]
    obs = to_observations(stack_trajectories(trs))
    res = fit_multivariate(obs, FitConfig(default_hyperparams(obs.X, obs.dt), gd_max_iters=50))
    assert len(res) == 3 and all(r.sigma_bar.shape == (25,) for r in res)
