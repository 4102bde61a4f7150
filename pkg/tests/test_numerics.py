import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sde_recover.numerics import (DimensionMismatchError, FactorizationError, NotSymmetricError,
                                  factor_spd, log_det, solve_spd)
from conftest import random_spd


def adjugate_inverse(a):
    """Inverse from cofactors; independent of any factorization."""
    n = a.shape[0]
    cof = np.empty_like(a)
    for i in range(n):
        for j in range(n):
            minor = np.delete(np.delete(a, i, axis=0), j, axis=1)
            cof[i, j] = (-1) ** (i + j) * np.linalg.det(minor)
    return cof.T / np.linalg.det(a)


def test_scalar_factor():
    f = factor_spd([[4.0]])
    assert f.lower[0, 0] == 2.0
    assert f.jitter == 0.0


def test_identity_factor():
    f = factor_spd(np.eye(3))
    np.testing.assert_array_equal(f.lower, np.eye(3))
    assert f.jitter == 0.0


def test_singular_matrix_escalates_jitter():
    a = np.ones((2, 2))
    f = factor_spd(a, (0.0, 1e-8, 1e-6))
    assert f.jitter >= 1e-8
    recon = f.lower @ f.lower.T
    target = a + f.jitter * np.eye(2)
    assert np.linalg.norm(recon - target) / np.linalg.norm(target) < 1e-8
    assert np.all(np.diag(f.lower) > 0)


def test_exhausted_ladder_raises():
    with pytest.raises(FactorizationError):
        factor_spd(-np.eye(2), (0.0, 1e-8))


def test_not_symmetric():
    with pytest.raises(NotSymmetricError):
        factor_spd([[1.0, 0.5], [0.0, 1.0]])


def test_identity_solve():
    np.testing.assert_array_equal(solve_spd(factor_spd(np.eye(2)), [3.0, 5.0]), [3.0, 5.0])


def test_scalar_solve():
    assert solve_spd(factor_spd([[4.0]]), [8.0])[0] == pytest.approx(2.0)


def test_solve_matches_adjugate_inverse(rng):
    a = random_spd(5, rng)
    col = solve_spd(factor_spd(a), np.eye(5)[:, 0])
    np.testing.assert_allclose(col, adjugate_inverse(a)[:, 0], rtol=1e-10, atol=1e-12)


def test_solve_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        solve_spd(factor_spd(np.eye(2)), np.ones(3))


@pytest.mark.parametrize("a, expected", [
    (np.eye(3), 0.0),
    (np.array([[math.e]]), 1.0),
    (np.diag([2.0, 8.0]), math.log(16.0)),
])
def test_log_det(a, expected):
    assert log_det(factor_spd(a)) == pytest.approx(expected, abs=1e-12)


@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_solve_roundtrip(n, seed):
    rng = np.random.default_rng(seed)
    a = random_spd(n, rng, cond=1e3)
    v = rng.standard_normal(n)
    np.testing.assert_allclose(solve_spd(factor_spd(a), a @ v), v, rtol=1e-6, atol=1e-9)


@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=10))
@settings(max_examples=50, deadline=None)
def test_log_det_diagonal(d):
    assert log_det(factor_spd(np.diag(d))) == pytest.approx(float(np.sum(np.log(d))), rel=1e-12,
                                                           abs=1e-12)


def test_jitter_nondecreasing_as_matrix_degenerates():
    base = np.ones((3, 3))
    jitters = [factor_spd(base + eps * np.eye(3)).jitter for eps in (1e-1, 1e-5, 1e-9, 1e-13, 0.0)]
    assert all(a <= b for a, b in zip(jitters, jitters[1:]))
    assert jitters[0] == 0.0 and jitters[-1] > 0.0
