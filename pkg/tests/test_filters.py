import numpy as np
import pytest

from dualfilt import (
    FilterState,
    FiniteModel,
    KalmanState,
    TimeGrid,
    ZakaiState,
    conditional_variance,
    forward_marginal,
    kalman_bucy_step,
    validate_model,
    wonham_step,
    wonham_trajectory_ensemble,
    zakai_step,
)
from dualfilt.ensemble import simulate_batch
from dualfilt.errors import DimensionMismatch
from dualfilt.hmm import path_stream
from dualfilt.lq import run_kalman_filter, simulate_lg_path


def static_model():
    return validate_model(
        FiniteModel(np.zeros((2, 2)), np.zeros((2, 1)), np.array([0.3, 0.7]))
    )


def test_wonham_static_model_unchanged():
    m = static_model()
    state = FilterState(pi=m.prior.copy())
    out = wonham_step(m, state, np.array([0.1]), 0.01)
    assert np.allclose(out.pi, m.prior, atol=1e-14)


def test_wonham_pure_prediction(canon2):
    # H=0: the filter reduces to the forward equation, O(dt) error
    m = validate_model(
        FiniteModel(canon2.rate_matrix, np.zeros((2, 1)), canon2.prior)
    )
    from dualfilt import expm

    K = 200
    state = FilterState(pi=np.array([1.0, 0.0]))
    for _ in range(K):
        state = wonham_step(m, state, np.array([0.0]), 1.0 / K)
    expect = expm(m.rate_matrix.T) @ np.array([1.0, 0.0])
    assert np.max(np.abs(state.pi - expect)) < 5.0 / K


def test_wonham_tower_identity(canon2):
    n, K = 20_000, 50
    grid = TimeGrid(1.0, K)
    _, dZ = simulate_batch(canon2, grid, 17, 0, n)
    pi, _ = wonham_trajectory_ensemble(canon2, dZ, grid.dt)
    f = np.array([0.0, 1.0])
    for k in (K // 2, K):
        vals = pi[:, k, :] @ f
        expect = forward_marginal(canon2, grid.times[k]) @ f
        assert abs(vals.mean() - expect) < 3 * vals.std() / np.sqrt(n)


def test_wonham_stays_on_simplex(model3):
    grid = TimeGrid(1.0, 100)
    _, dZ = simulate_batch(model3, grid, 5, 0, 200)
    pi, _ = wonham_trajectory_ensemble(model3, dZ, grid.dt)
    assert np.all(pi >= 0.0)
    assert np.max(np.abs(pi.sum(axis=2) - 1.0)) < 1e-12


def test_zakai_static_trivial():
    m = static_model()
    state = ZakaiState(sigma_unnorm=m.prior.copy(), log_norm=0.0)
    out = zakai_step(m, state, np.array([0.2]), 0.01)
    assert np.allclose(out.sigma_unnorm, m.prior, atol=1e-14)
    assert abs(out.log_norm) < 1e-14


def test_zakai_point_mass_absorbing():
    m = validate_model(
        FiniteModel(np.zeros((2, 2)), np.array([[1.0], [3.0]]), np.array([1.0, 0.0]))
    )
    state = ZakaiState(sigma_unnorm=np.array([1.0, 0.0]), log_norm=0.0)
    for _ in range(10):
        state = zakai_step(m, state, np.array([0.05]), 0.01)
    assert np.allclose(state.sigma_unnorm, [1.0, 0.0], atol=1e-14)


def test_zakai_matches_wonham(canon2):
    # Kallianpur-Striebel: normalized Zakai tracks the Wonham filter
    K = 200
    grid = TimeGrid(1.0, K)
    _, dZ = simulate_batch(canon2, grid, 23, 0, 1)
    pi, _ = wonham_trajectory_ensemble(canon2, dZ, grid.dt)
    state = ZakaiState(sigma_unnorm=canon2.prior.copy(), log_norm=0.0)
    worst = 0.0
    for k in range(K):
        state = zakai_step(canon2, state, dZ[0, k], grid.dt)
        worst = max(worst, np.max(np.abs(state.sigma_unnorm - pi[0, k + 1])))
    assert worst <= 5.0 / K


def test_kalman_static_model(lg_scalar):
    from dualfilt import LGModel, validate_lg_model

    lg = validate_lg_model(
        LGModel(
            A=np.zeros((1, 1)),
            H=np.zeros((1, 1)),
            sigma=np.zeros((1, 1)),
            m0=np.array([0.7]),
            Sigma0=np.array([[2.0]]),
        )
    )
    state = KalmanState(mean=lg.m0.copy(), cov=lg.Sigma0.copy())
    for _ in range(10):
        state = kalman_bucy_step(lg, state, np.array([0.0]), 0.01)
    assert np.allclose(state.mean, [0.7])
    assert np.allclose(state.cov, [[2.0]])


def test_kalman_scalar_steady_state(lg_scalar):
    # Sigma' = 1 - Sigma^2 has the stable fixed point 1
    grid = TimeGrid(10.0, 2000)
    state = KalmanState(mean=np.zeros(1), cov=np.ones((1, 1)))
    for _ in range(grid.steps):
        state = kalman_bucy_step(lg_scalar, state, np.array([0.0]), grid.dt)
    assert abs(state.cov[0, 0] - 1.0) < 1e-4


def test_kalman_scalar_tanh_flow(lg_scalar):
    from dualfilt import LGModel, validate_lg_model

    lg = validate_lg_model(
        LGModel(
            A=np.zeros((1, 1)),
            H=np.ones((1, 1)),
            sigma=np.ones((1, 1)),
            m0=np.zeros(1),
            Sigma0=np.zeros((1, 1)),
        )
    )
    grid = TimeGrid(1.0, 1000)
    state = KalmanState(mean=np.zeros(1), cov=np.zeros((1, 1)))
    for _ in range(grid.steps):
        state = kalman_bucy_step(lg, state, np.array([0.0]), grid.dt)
    assert abs(state.cov[0, 0] - np.tanh(1.0)) < 1e-8


def test_kalman_mean_unbiased(lg_scalar):
    n = 5000
    grid = TimeGrid(1.0, 100)
    mT = np.empty(n)
    for i in range(n):
        _, dZ = simulate_lg_path(
            lg_scalar, grid, path_stream(31, i, 0), path_stream(31, i, 1)
        )
        means, _ = run_kalman_filter(lg_scalar, dZ, grid)
        mT[i] = means[-1, 0]
    # A=0: E(m_T) = m_0 = 0
    assert abs(mT.mean()) < 3 * mT.std() / np.sqrt(n)


def test_kalman_covariance_path_independent(lg_scalar):
    grid = TimeGrid(1.0, 50)
    covs = []
    for seed in (1, 2):
        _, dZ = simulate_lg_path(
            lg_scalar, grid, path_stream(seed, 0, 0), path_stream(seed, 0, 1)
        )
        _, cov = run_kalman_filter(lg_scalar, dZ, grid)
        covs.append(cov)
    assert np.array_equal(covs[0], covs[1])


def test_conditional_variance_constant():
    assert conditional_variance(np.array([0.2, 0.8]), np.array([3.0, 3.0])) == 0.0


def test_conditional_variance_point_mass():
    assert conditional_variance(np.array([1.0, 0.0]), np.array([0.0, 5.0])) == 0.0


def test_conditional_variance_bernoulli():
    v = conditional_variance(np.array([0.5, 0.5]), np.array([0.0, 1.0]))
    assert abs(v - 0.25) < 1e-15


def test_conditional_variance_nonnegative_and_mismatch():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pi = rng.dirichlet(np.ones(4))
        f = rng.standard_normal(4)
        assert conditional_variance(pi, f) >= 0.0
    with pytest.raises(DimensionMismatch):
        conditional_variance(np.array([0.5, 0.5]), np.zeros(3))
