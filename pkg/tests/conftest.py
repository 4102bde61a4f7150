import numpy as np
import pytest

from sde_recover.kernels import HyperParams, KernelSpec
from sde_recover.simulate import ObservationSet


def random_spd(n, rng, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.geomspace(1.0, cond, n)
    return (q * eig) @ q.T


def random_instance(n, seed, dt=0.1, lam=0.01):
    """Small well-conditioned estimator problem."""
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(-1.0, 1.0, n))
    obs = ObservationSet(x, rng.normal(scale=0.3, size=n), np.full(n, dt))
    hp = HyperParams(KernelSpec.matern52(1.0, 0.4), KernelSpec.matern52(0.8, 0.5), lam=lam,
                     gamma=1e-3)
    sigma = rng.uniform(0.3, 1.2, n)
    return obs, hp, sigma


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
