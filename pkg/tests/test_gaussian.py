import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asyncgibbs import GaussianTarget, build_exponential_target, build_jacobi_target, conditional_block, jacobi_step
from asyncgibbs.diagnostics import batch_means_se
from asyncgibbs.engine import random_scan_gibbs
from asyncgibbs.gaussian import (
    diagonally_dominant,
    jacobi_covariance,
    jacobi_iteration_matrix,
    relative_frobenius_error,
    spectral_radius,
)
from oracles import exp_corr


def test_jacobi_covariance_values():
    cov = build_jacobi_target(8).covariance
    assert np.allclose(np.diag(cov), 87.5, atol=0.05)
    off = cov[~np.eye(8, dtype=bool)]
    assert np.allclose(off, -12.5, atol=0.05)
    assert np.allclose(cov, 100 * np.eye(8) - 10000 / 801 * np.ones((8, 8)), atol=1e-9)
    assert np.allclose(jacobi_covariance(8), np.linalg.inv(0.01 * np.eye(8) + 1), atol=1e-9)


def test_jacobi_two_dim():
    t = build_jacobi_target(2)
    assert np.array_equal(t.precision, [[1.01, 1.0], [1.0, 1.01]])
    assert np.allclose(t.covariance, np.linalg.inv(t.precision))


def test_exponential_target_structure():
    t = build_exponential_target(8, 0.5)
    assert t.covariance[0, 1] == pytest.approx(np.exp(-0.5), abs=1e-12)
    assert np.allclose(np.diag(t.covariance), 1.0)
    band = np.abs(np.subtract.outer(np.arange(8), np.arange(8))) > 1
    assert np.abs(t.precision[band]).max() < 1e-10


def test_invalid_targets_rejected():
    with pytest.raises(ValueError):
        GaussianTarget(np.zeros(2), [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        GaussianTarget(np.zeros(3), np.eye(3), blocks=[[0, 1], [1, 2]])
    with pytest.raises(ValueError):
        build_jacobi_target(1)


def test_conditional_block_independent_and_bivariate():
    ind = GaussianTarget(np.zeros(3), np.diag([1.0, 2.0, 4.0]))
    m, c = conditional_block(ind, np.array([5.0, -3.0, 9.0]), 2)
    assert np.allclose(m, 0.0) and np.allclose(c, 0.25)
    rho = 0.7
    biv = GaussianTarget(np.zeros(2), np.linalg.inv([[1, rho], [rho, 1]]))
    m, c = conditional_block(biv, np.array([0.0, 1.5]), 0)
    assert np.allclose(m, rho * 1.5) and np.allclose(c, 1 - rho**2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_conditional_block_matches_dense_partition(seed):
    blocks = [[0, 1], [2, 3], [4, 5], [6, 7]]
    t = build_exponential_target(8, 0.5, blocks=blocks)
    x = np.random.default_rng(seed).standard_normal(8)
    m, c = conditional_block(t, x, 1)
    cov = exp_corr(8, 0.5)
    a, r = [2, 3], [0, 1, 4, 5, 6, 7]
    k = cov[np.ix_(a, r)] @ np.linalg.inv(cov[np.ix_(r, r)])
    assert np.allclose(m, k @ x[r], atol=1e-10)
    assert np.allclose(c, cov[np.ix_(a, a)] - k @ cov[np.ix_(r, a)], atol=1e-10)


def test_precision_roundtrip():
    for dim in (2, 8, 64):
        t = build_exponential_target(dim, 0.5)
        back = np.linalg.inv(t.covariance)
        assert np.linalg.norm(back - t.precision) / np.linalg.norm(t.precision) < 1e-8


def test_jacobi_spectral_radii():
    assert spectral_radius(jacobi_iteration_matrix(build_jacobi_target(8).precision)) > 1
    assert spectral_radius(jacobi_iteration_matrix(build_exponential_target(8, 0.5).precision)) < 1
    assert not diagonally_dominant(build_jacobi_target(8).precision)


def test_jacobi_step_expectation():
    t = build_exponential_target(8, 0.5)
    x = np.linspace(-3, 3, 8)
    rng = np.random.default_rng(0)
    draws = np.array([jacobi_step(t, x, rng) for _ in range(40000)])
    expected = jacobi_iteration_matrix(t.precision) @ x
    se = draws.std(0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(0) - expected) < 4 * se)


def test_jacobi_step_diagonal_is_stationary_in_one_step():
    t = GaussianTarget(np.zeros(3), np.diag([1.0, 4.0, 0.25]))
    rng = np.random.default_rng(1)
    draws = np.array([jacobi_step(t, np.array([50.0, -50.0, 9.0]), rng) for _ in range(20000)])
    assert np.allclose(draws.mean(0), 0, atol=0.1)
    assert np.allclose(draws.var(0), [1.0, 0.25, 4.0], rtol=0.05)


def test_expected_jacobi_iterates():
    jac = jacobi_iteration_matrix(build_jacobi_target(8).precision)
    exp = jacobi_iteration_matrix(build_exponential_target(8, 0.5).precision)
    x = np.arange(1.0, 9.0)
    a, b = x.copy(), x.copy()
    for _ in range(50):
        a, b = jac @ a, exp @ b
    assert np.abs(a).max() > 1e20
    assert np.abs(b).max() < 1e-2


def test_gibbs_sweep_recovers_moments():
    t = build_exponential_target(4, 0.5)
    tr = random_scan_gibbs(t, 80000, seed=3)
    z = np.abs(tr.mean(0)) / batch_means_se(tr)
    assert np.all(z < 3)
    assert relative_frobenius_error(np.cov(tr.T), t.covariance) < 0.05
