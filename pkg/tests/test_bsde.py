import numpy as np
import pytest

from dualfilt import TimeGrid
from dualfilt.bsde import (
    Policy,
    RegressionSpec,
    control_from_maximum_principle,
    costate_from_ansatz,
    duality_gap_report,
    feature_count,
    hamiltonian_control_derivative,
    lsmc_backward_solve,
    lsmc_fit,
    martingale_drift_check,
    optimal_feedback_control,
    poly_features,
    prop1_trajectory_check,
)
from dualfilt.dual_det import DeterministicControl, solve_backward_dual_ode
from dualfilt.ensemble import simulate_ensemble
from dualfilt.errors import DegenerateMass, DimensionMismatch, FeatureCountTooLarge

F01 = np.array([0.0, 1.0])
SPEC = RegressionSpec(degree=2, ridge=1e-8)


# ---------------------------------------------------------------------------
# pointwise control algebra


def test_feedback_hand_value(canon2):
    U = optimal_feedback_control(
        np.array([0.5, 0.5]), F01, np.zeros((2, 1)), canon2.obs_matrix
    )
    assert np.allclose(U, [-0.25], atol=1e-15)


def test_feedback_constant_Y_no_V(canon2):
    U = optimal_feedback_control(
        np.array([0.3, 0.7]), np.ones(2), np.zeros((2, 1)), canon2.obs_matrix
    )
    assert np.allclose(U, 0.0, atol=1e-15)


def test_feedback_dimension_check(canon2):
    with pytest.raises(DimensionMismatch):
        optimal_feedback_control(
            np.array([0.2, 0.3, 0.5]), np.zeros(3), np.zeros((3, 1)),
            canon2.obs_matrix,
        )


def test_costate_sums_to_zero_and_shift_invariant():
    rng = np.random.default_rng(0)
    for _ in range(50):
        d = int(rng.integers(2, 6))
        s = rng.uniform(0.1, 2.0, d)
        Y = rng.standard_normal(d)
        P = costate_from_ansatz(s, Y)
        assert abs(P.sum()) < 1e-12 * (1.0 + np.abs(P).max())
        P2 = costate_from_ansatz(s, Y + 4.2)
        assert np.allclose(P, P2, atol=1e-12)


def test_costate_rejects_nonpositive_mass():
    with pytest.raises(DegenerateMass):
        costate_from_ansatz(np.array([1.0, 0.0]), F01)


def test_max_principle_matches_feedback_law():
    # the ansatz co-state plugged into the maximum-principle control
    # reproduces the feedback law exactly
    rng = np.random.default_rng(42)
    for _ in range(100):
        d = int(rng.integers(2, 6))
        m = int(rng.integers(1, 4))
        s = rng.uniform(0.05, 3.0, d)
        Y = rng.standard_normal(d)
        V = rng.standard_normal((d, m))
        H = rng.standard_normal((d, m))
        pi = s / s.sum()
        P = costate_from_ansatz(s, Y)
        u_mp = control_from_maximum_principle(P, s, V, H)
        u_fb = optimal_feedback_control(pi, Y, V, H)
        assert np.max(np.abs(u_mp - u_fb)) < 1e-12


def test_max_principle_is_stationary_point():
    rng = np.random.default_rng(7)
    for _ in range(100):
        d = int(rng.integers(2, 6))
        m = int(rng.integers(1, 4))
        s = rng.uniform(0.05, 3.0, d)
        P = rng.standard_normal(d)
        V = rng.standard_normal((d, m))
        H = rng.standard_normal((d, m))
        u = control_from_maximum_principle(P, s, V, H)
        g = hamiltonian_control_derivative(u, P, s, V, H)
        assert np.max(np.abs(g)) < 1e-12


# ---------------------------------------------------------------------------
# regression basis


def test_poly_features_counts():
    # d-1 simplex coordinates, total degree: binomial(d-1+deg, deg) terms
    assert feature_count(2, 2) == 3
    assert feature_count(3, 2) == 6
    assert feature_count(3, 3) == 10


def test_poly_features_values():
    X = poly_features(np.array([[0.3, 0.7]]), 2)
    assert np.allclose(X, [[1.0, 0.3, 0.09]])


# ---------------------------------------------------------------------------
# LSMC solver


def test_lsmc_constant_terminal_is_exact(canon2):
    grid = TimeGrid(1.0, 25)
    ens = simulate_ensemble(canon2, grid, 500, 3)
    traj = lsmc_backward_solve(canon2, np.ones(2), Policy(kind="optimal"), ens, SPEC)
    # constants are killed by Gamma and by the feedback law: everything flat
    assert np.max(np.abs(traj.Y - 1.0)) < 1e-7
    assert np.max(np.abs(traj.U)) < 1e-7


def test_lsmc_open_loop_matches_backward_ode(canon2):
    K, N = 50, 4000
    grid = TimeGrid(1.0, K)
    u = DeterministicControl.constant(grid, [0.2])
    ode = solve_backward_dual_ode(canon2, F01, u, grid)
    ens = simulate_ensemble(canon2, grid, N, 9)
    fits = lsmc_fit(canon2, F01, Policy(kind="open_loop", u=u.u), ens, SPEC)
    Y0, V0, U0 = fits.initial_solution()
    tol = 5.0 * (1.0 / K + 1.0 / np.sqrt(N))
    assert np.max(np.abs(Y0 - ode.y[0])) < tol
    assert np.allclose(U0, [0.2])


def test_lsmc_no_observation_V_vanishes(canon2):
    from dualfilt import FiniteModel, validate_model

    m = validate_model(
        FiniteModel(canon2.rate_matrix, np.zeros((2, 1)), canon2.prior)
    )
    grid = TimeGrid(1.0, 40)
    ens = simulate_ensemble(m, grid, 4000, 21)
    traj = lsmc_backward_solve(m, F01, Policy(kind="optimal"), ens, SPEC)
    # H=0: pi is deterministic, the regression collapses to the ensemble
    # mean of a zero-mean target, and everything vanishes to roundoff
    assert np.max(np.abs(traj.V)) < 1e-10
    assert np.max(np.abs(traj.U)) < 1e-10


def test_lsmc_scale_equivariance(canon2):
    grid = TimeGrid(1.0, 30)
    ens = simulate_ensemble(canon2, grid, 2000, 15)
    a = lsmc_backward_solve(canon2, F01, Policy(kind="optimal"), ens, SPEC)
    b = lsmc_backward_solve(canon2, 2.0 * F01, Policy(kind="optimal"), ens, SPEC)
    scale = 1.0 + np.abs(b.Y).max()
    assert np.max(np.abs(b.Y - 2.0 * a.Y)) < 1e-9 * scale
    assert np.max(np.abs(b.U - 2.0 * a.U)) < 1e-9 * scale
    assert np.max(np.abs(b.V - 2.0 * a.V)) < 1e-9 * scale


def test_lsmc_feature_budget_enforced(canon2):
    grid = TimeGrid(1.0, 10)
    ens = simulate_ensemble(canon2, grid, 25, 0)
    with pytest.raises(FeatureCountTooLarge):
        lsmc_fit(canon2, F01, Policy(kind="optimal"), ens, SPEC)


# ---------------------------------------------------------------------------
# diagnostics at smoke scale


def test_gap_report_smoke(canon2):
    rep = duality_gap_report(
        canon2, F01, Policy(kind="optimal"), TimeGrid(1.0, 100), 5000, 51, SPEC
    )
    # gap is nonnegative up to noise and small at this scale
    assert rep.gap > -3.0 * rep.gap_stderr
    assert rep.gap < 2e-2
    with pytest.raises(ValueError):
        duality_gap_report(
            canon2, F01, Policy(kind="optimal"), TimeGrid(1.0, 10), 100, 0, SPEC
        )


def test_martingale_drift_smoke(canon2):
    grid = TimeGrid(1.0, 100)
    opt = martingale_drift_check(
        canon2, F01, Policy(kind="optimal"), grid, 20_000, 61, SPEC
    )
    assert abs(opt.total_mean) < max(3.0 * opt.total_stderr, 5e-3)
    pert = martingale_drift_check(
        canon2, F01, Policy(kind="perturbed", delta=0.5), grid, 20_000, 61, SPEC
    )
    # perturbation by delta costs about -delta^2 T of drift
    assert pert.total_mean < -0.5 * 0.25 + 3.0 * pert.total_stderr


def test_prop1_smoke(canon2):
    rep = prop1_trajectory_check(
        canon2, F01, TimeGrid(1.0, 100), 5000, 71, SPEC
    )
    assert rep.rms[0] < 1e-10
    assert rep.max_rms < 5e-2
