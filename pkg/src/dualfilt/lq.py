"""Exact linear-Gaussian specializations.

Minimum-variance dual (feedback form certified against f^T Sigma_T f),
Kalman-estimator recovery from the dual control, the minimum-energy /
maximum-likelihood dual solved as a banded quadratic program, and the
mean/variance decomposition of the relative-entropy (Mitter-Newton)
formulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import GridMismatch, SingularPrior, SolverFailure
from .filters import KalmanState, kalman_bucy_step, riccati_rk4_step
from .models import LGModel, TimeGrid

NULLSPACE_PENALTY = 1e8
NULLSPACE_RESIDUAL_TOL = 1e-5


@dataclass(frozen=True)
class MVDualSolution:
    """Minimum-variance dual trajectory with certified optimal value."""

    y: np.ndarray            # (K+1, d)
    u: np.ndarray            # (K, m), per-cell (midpoint) feedback values
    value: float             # quadrature evaluation of the dual cost
    certificate: float       # f^T Sigma_T f; equals value at the optimum


@dataclass(frozen=True)
class MEDualSolution:
    m_tilde: np.ndarray      # (K+1, d)
    u: np.ndarray            # (K, p)
    m_tilde_0: np.ndarray
    value: float


def solve_kalman_dre(lg: LGModel, grid: TimeGrid) -> np.ndarray:
    """RK4 integration of the covariance DRE from Sigma0, (K+1, d, d)."""
    out = np.empty((grid.steps + 1, lg.d, lg.d))
    out[0] = 0.5 * (lg.Sigma0 + lg.Sigma0.T)
    for k in range(grid.steps):
        out[k + 1] = riccati_rk4_step(lg, out[k], grid.dt)
    return out


def _dre_with_midpoints(lg: LGModel, grid: TimeGrid) -> np.ndarray:
    """DRE on a doubled grid: index 2k is t_k, index 2k+1 the midpoint."""
    fine = TimeGrid(horizon=grid.horizon, steps=2 * grid.steps)
    return solve_kalman_dre(lg, fine)


def solve_min_variance_dual(
    lg: LGModel, f: np.ndarray, grid: TimeGrid
) -> MVDualSolution:
    """Optimal feedback u_t = -H^T Sigma_t y_t, integrating the closed-loop
    backward ODE -dy/dt = (A - H H^T Sigma_t) y from y_T = f.

    The returned certificate f^T Sigma_T f is the known optimal value;
    callers compare it with the quadrature value to certify optimality.
    """
    f = np.asarray(f, dtype=float).reshape(lg.d)
    K, dt = grid.steps, grid.dt
    S = _dre_with_midpoints(lg, grid)            # (2K+1, d, d)
    HHt = lg.H @ lg.H.T
    sst = lg.sigma @ lg.sigma.T

    def rhs(S_t, y):
        return -(lg.A @ y - HHt @ (S_t @ y))

    y = np.empty((K + 1, lg.d))
    y[-1] = f
    for k in range(K - 1, -1, -1):
        h = -dt
        y1 = y[k + 1]
        k1 = rhs(S[2 * k + 2], y1)
        k2 = rhs(S[2 * k + 1], y1 + 0.5 * h * k1)
        k3 = rhs(S[2 * k + 1], y1 + 0.5 * h * k2)
        k4 = rhs(S[2 * k], y1 + h * k3)
        y[k] = y1 + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    # per-cell control at the midpoint, for the discrete estimator
    y_mid = 0.5 * (y[:-1] + y[1:])
    u = -np.einsum("im,kij,kj->km", lg.H, S[1::2], y_mid)

    # quadrature value of the cost along grid points
    u_grid = -np.einsum("im,kij,kj->km", lg.H, S[::2], y)
    integrand = np.einsum("ki,ij,kj->k", y, sst, y) + np.sum(u_grid * u_grid, axis=1)
    value = float(y[0] @ lg.Sigma0 @ y[0] + np.trapezoid(integrand, dx=dt))
    certificate = float(f @ S[-1] @ f)
    return MVDualSolution(y=y, u=u, value=value, certificate=certificate)


def recover_kalman_from_dual(
    lg: LGModel, f: np.ndarray, sol: MVDualSolution, dZ: np.ndarray
) -> float:
    """S_T = y_0^T m_0 - sum_k u_k^T dZ_k; matches f^T m_T of the Kalman
    filter on the same path up to discretization error."""
    if dZ.shape[0] != sol.u.shape[0]:
        raise GridMismatch(f"{dZ.shape[0]} increments vs {sol.u.shape[0]} cells")
    return float(sol.y[0] @ lg.m0 - np.sum(sol.u * dZ))


def run_kalman_filter(lg: LGModel, dZ: np.ndarray, grid: TimeGrid):
    """Kalman-Bucy filter along one observation path; returns means
    (K+1, d) and covariances (K+1, d, d)."""
    means = np.empty((grid.steps + 1, lg.d))
    covs = np.empty((grid.steps + 1, lg.d, lg.d))
    state = KalmanState(mean=lg.m0.copy(), cov=0.5 * (lg.Sigma0 + lg.Sigma0.T))
    means[0], covs[0] = state.mean, state.cov
    for k in range(grid.steps):
        state = kalman_bucy_step(lg, state, dZ[k], grid.dt)
        means[k + 1], covs[k + 1] = state.mean, state.cov
    return means, covs


def _matrix_sqrt_psd(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    w = np.clip(w, 0.0, None)
    return V @ np.diag(np.sqrt(w)) @ V.T


def simulate_lg_path(
    lg: LGModel,
    grid: TimeGrid,
    rng_state: np.random.Generator,
    rng_obs: np.random.Generator,
):
    """Euler-Maruyama sample of (X, dZ) for the linear-Gaussian model."""
    K, dt = grid.steps, grid.dt
    sq = np.sqrt(dt)
    X = np.empty((K + 1, lg.d))
    X[0] = lg.m0 + _matrix_sqrt_psd(lg.Sigma0) @ rng_state.standard_normal(lg.d)
    dB = rng_state.standard_normal((K, lg.p)) * sq
    dW = rng_obs.standard_normal((K, lg.m)) * sq
    for k in range(K):
        X[k + 1] = X[k] + dt * (lg.A.T @ X[k]) + lg.sigma @ dB[k]
    dZ = X[:-1] @ lg.H * dt + dW
    return X, dZ


# ---------------------------------------------------------------------------
# Minimum-energy dual (trajectory maximum likelihood)


def solve_min_energy_dual(
    lg: LGModel, dZ: np.ndarray, grid: TimeGrid
) -> MEDualSolution:
    """Minimize |m0 - m~_0|^2_{Sigma0^-1} + int |u|^2 + |z' - H^T m~|^2 dt
    subject to dm~/dt = A^T m~ + sigma u.

    Forward-Euler discretization with per-cell elimination of u via the
    pseudo-inverse of sigma sigma^T; components of the dynamics residual
    in the null space of sigma sigma^T are forced to zero by a large
    penalty and verified after the solve.
    """
    K, dt, d = grid.steps, grid.dt, lg.d
    if dZ.shape != (K, lg.m):
        raise GridMismatch(f"dZ shape {dZ.shape} != ({K}, {lg.m})")
    try:
        Sigma0_inv = np.linalg.inv(lg.Sigma0)
    except np.linalg.LinAlgError as exc:
        raise SingularPrior(f"Sigma0 not invertible: {exc}") from exc
    if np.linalg.cond(lg.Sigma0) > 1e12:
        raise SingularPrior("Sigma0 numerically singular")

    sst = lg.sigma @ lg.sigma.T
    W = np.linalg.pinv(sst)
    null_proj = np.eye(d) - sst @ W
    W_pen = W + NULLSPACE_PENALTY * null_proj

    # residual map v_k = C m_k + D m_{k+1} with sigma u_k = v_k
    C = -(np.eye(d) / dt + lg.A.T)
    D = np.eye(d) / dt
    HHt = lg.H @ lg.H.T

    n = (K + 1) * d
    rows, cols, vals = [], [], []
    b = np.zeros(n)

    def add_block(i, j, B):
        r, c = np.meshgrid(np.arange(d) + i * d, np.arange(d) + j * d, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(B.ravel())

    add_block(0, 0, Sigma0_inv)
    b[:d] += Sigma0_inv @ lg.m0
    CtWC = dt * C.T @ W_pen @ C
    CtWD = dt * C.T @ W_pen @ D
    DtWD = dt * D.T @ W_pen @ D
    for k in range(K):
        add_block(k, k, CtWC + dt * HHt)
        add_block(k, k + 1, CtWD)
        add_block(k + 1, k, CtWD.T)
        add_block(k + 1, k + 1, DtWD)
        b[k * d:(k + 1) * d] += lg.H @ dZ[k]

    G = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    try:
        m_flat = spsolve(G, b)
    except Exception as exc:  # pragma: no cover - scipy raises various types
        raise SolverFailure(f"banded solve failed: {exc}") from exc
    if not np.all(np.isfinite(m_flat)):
        raise SolverFailure("minimum-energy solve returned non-finite trajectory")

    m_tilde = m_flat.reshape(K + 1, d)
    v = m_tilde[:-1] @ C.T + m_tilde[1:] @ D.T          # (K, d)
    null_res = np.abs(v @ null_proj.T).max() if K else 0.0
    scale = 1.0 + np.abs(v).max()
    if null_res > NULLSPACE_RESIDUAL_TOL * scale:
        raise SolverFailure(
            f"dynamics residual {null_res:.3e} outside the range of sigma"
        )
    u = v @ np.linalg.pinv(lg.sigma).T                  # (K, p)
    value = min_energy_objective(lg, m_tilde[0], u, dZ, grid)
    return MEDualSolution(m_tilde=m_tilde, u=u, m_tilde_0=m_tilde[0], value=value)


def min_energy_objective(
    lg: LGModel,
    m_tilde_0: np.ndarray,
    u: np.ndarray,
    dZ: np.ndarray,
    grid: TimeGrid,
) -> float:
    """Discrete minimum-energy cost for a given (m~_0, u): prior mismatch
    plus control energy plus observation misfit, with the white-noise
    derivative realized as the measured increment dZ_k / dt."""
    K, dt = grid.steps, grid.dt
    Sigma0_inv = np.linalg.inv(lg.Sigma0)
    m_t = _propagate_mean_euler(lg, m_tilde_0, u, grid)
    dm = lg.m0 - m_tilde_0
    J = float(dm @ Sigma0_inv @ dm)
    misfit = dZ / dt - m_t[:-1] @ lg.H
    J += dt * float(np.sum(u * u) + np.sum(misfit * misfit))
    return J


def _propagate_mean_euler(
    lg: LGModel, m0: np.ndarray, u: np.ndarray, grid: TimeGrid
) -> np.ndarray:
    m = np.empty((grid.steps + 1, lg.d))
    m[0] = m0
    for k in range(grid.steps):
        m[k + 1] = m[k] + grid.dt * (lg.A.T @ m[k] + lg.sigma @ u[k])
    return m


# ---------------------------------------------------------------------------
# Mitter-Newton linear-Gaussian decomposition


def mitter_newton_lg_decompose(
    lg: LGModel,
    dZ: np.ndarray,
    m_tilde_0: np.ndarray,
    u: np.ndarray,
    K_gain_path: np.ndarray,
    grid: TimeGrid,
):
    """Mean cost J1 and variance cost J2 of the relative-entropy dual.

    The mean propagates under u alone and the variance under the gain
    path alone, so J1 never reads K_gain_path and J2 never reads
    (m_tilde_0, u): the decoupling is structural. 2*J1 equals the
    minimum-energy objective for the same (m~_0, u).
    """
    K, dt = grid.steps, grid.dt
    if dZ.shape != (K, lg.m):
        raise GridMismatch(f"dZ shape {dZ.shape} != ({K}, {lg.m})")
    if K_gain_path.shape != (K, lg.p, lg.d):
        raise GridMismatch(
            f"gain path shape {K_gain_path.shape} != ({K}, {lg.p}, {lg.d})"
        )

    J1 = 0.5 * min_energy_objective(lg, m_tilde_0, u, dZ, grid)

    Sigma0_inv = np.linalg.inv(lg.Sigma0)
    S = 0.5 * (lg.Sigma0 + lg.Sigma0.T)
    sign, logdet = np.linalg.slogdet(S)
    if sign <= 0:
        raise SingularPrior("Sigma0 must be positive definite for J2")
    J2 = 0.5 * logdet + 0.5 * float(np.trace(S @ Sigma0_inv))
    sst = lg.sigma @ lg.sigma.T
    HHt = lg.H @ lg.H.T

    def var_rhs(S_t, Kg):
        Acl = lg.A.T + lg.sigma @ Kg
        return Acl @ S_t + S_t @ Acl.T + sst

    integrand = np.empty(K + 1)
    integrand[0] = 0.5 * float(
        np.trace(K_gain_path[0].T @ K_gain_path[0] @ S) + np.trace(HHt @ S)
    )
    for k in range(K):
        Kg = K_gain_path[k]
        k1 = var_rhs(S, Kg)
        k2 = var_rhs(S + 0.5 * dt * k1, Kg)
        k3 = var_rhs(S + 0.5 * dt * k2, Kg)
        k4 = var_rhs(S + dt * k3, Kg)
        S = S + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        S = 0.5 * (S + S.T)
        Kg_next = K_gain_path[min(k + 1, K - 1)]
        integrand[k + 1] = 0.5 * float(
            np.trace(Kg_next.T @ Kg_next @ S) + np.trace(HHt @ S)
        )
    J2 += float(np.trapezoid(integrand, dx=dt))
    return float(J1), float(J2)
