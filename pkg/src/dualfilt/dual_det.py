"""Dual control problem restricted to deterministic controls.

With deterministic terminal data and deterministic piecewise-constant
control, the martingale term of the dual control system vanishes and the
constraint collapses to the backward ODE -dy/dt = A y + H u. The value
of the control problem then has an exact quadrature expression, and the
duality identity J(u) = E|f(X_T) - S_T|^2 can be checked by Monte Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .ensemble import simulate_batch
from .errors import DimensionMismatch, GridMismatch, MaxIterationsExceeded
from .hmm import ObservationPath, combine_gamma, gamma_matrices, marginal_trajectory
from .models import FiniteModel, TimeGrid


@dataclass(frozen=True)
class DeterministicControl:
    """Piecewise-constant control, one m-vector per grid cell."""

    u: np.ndarray  # (K, m)

    @classmethod
    def zeros(cls, grid: TimeGrid, m: int) -> "DeterministicControl":
        return cls(u=np.zeros((grid.steps, m)))

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "DeterministicControl":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(u=np.tile(value, (grid.steps, 1)))


@dataclass(frozen=True)
class DualOdeSolution:
    y: np.ndarray  # (K+1, d)


@dataclass(frozen=True)
class CostReport:
    var0: float
    running: float
    total: float
    mc_mean: float | None = None
    mc_stderr: float | None = None
    z_score: float | None = None

    def as_dict(self) -> dict:
        return {
            "var0": self.var0,
            "running": self.running,
            "total": self.total,
            "mc_mean": self.mc_mean,
            "mc_stderr": self.mc_stderr,
            "z_score": self.z_score,
        }


def _rk4_cell_maps(A: np.ndarray, H: np.ndarray, dt: float):
    """Exact RK4 transfer maps for one backward cell with constant control:
    y_k = Phi y_{k+1} + Psi u_k."""
    d = A.shape[0]
    X = dt * A
    I = np.eye(d)
    Phi = I + X + X @ X / 2 + X @ X @ X / 6 + X @ X @ X @ X / 24
    Psi = dt * (I + X / 2 + X @ X / 6 + X @ X @ X / 24) @ H
    return Phi, Psi


def solve_backward_dual_ode(
    model: FiniteModel,
    f_terminal: np.ndarray,
    u: DeterministicControl,
    grid: TimeGrid,
) -> DualOdeSolution:
    """Integrate -dy/dt = A y + H u backward from y_T = f (RK4 per cell)."""
    f = np.asarray(f_terminal, dtype=float)
    if f.shape != (model.d,):
        raise DimensionMismatch(f"terminal function shape {f.shape} != ({model.d},)")
    if u.u.shape != (grid.steps, model.m):
        raise DimensionMismatch(
            f"control shape {u.u.shape} != ({grid.steps}, {model.m})"
        )
    Phi, Psi = _rk4_cell_maps(model.rate_matrix, model.obs_matrix, grid.dt)
    y = np.empty((grid.steps + 1, model.d))
    y[-1] = f
    for k in range(grid.steps - 1, -1, -1):
        y[k] = Phi @ y[k + 1] + Psi @ u.u[k]
    return DualOdeSolution(y=y)


def initial_variance(model: FiniteModel, y0: np.ndarray) -> float:
    """var_0(y0) = y0^T (diag(mu) - mu mu^T) y0."""
    mu = model.prior
    return float(mu @ (y0 * y0) - (mu @ y0) ** 2)


def exact_cost(
    model: FiniteModel,
    sol: DualOdeSolution,
    u: DeterministicControl,
    grid: TimeGrid,
    rho: np.ndarray | None = None,
) -> CostReport:
    """Quadrature evaluation of the dual cost, no Monte Carlo.

    Trapezoid rule on the state-fluctuation term rho_t(Gamma y_t); the
    control energy integrates exactly for piecewise-constant u.
    """
    if rho is None:
        rho = marginal_trajectory(model, grid)
    A = model.rate_matrix
    y = sol.y
    diff = y[:, :, None] - y[:, None, :]             # (K+1, d, d)
    gy = np.einsum("ij,kij->ki", A, diff * diff)     # Gamma y_t at each grid time
    gamma_term = np.einsum("ki,ki->k", rho, gy)
    running = float(
        np.trapezoid(gamma_term, dx=grid.dt) + grid.dt * np.sum(u.u * u.u)
    )
    var0 = initial_variance(model, y[0])
    return CostReport(var0=var0, running=running, total=var0 + running)


def terminal_estimator(
    model: FiniteModel,
    sol: DualOdeSolution,
    u: DeterministicControl,
    obs: ObservationPath,
) -> float:
    """S_T = mu^T y_0 - sum_k u_k^T dZ_k."""
    if obs.increments.shape[0] != u.u.shape[0]:
        raise GridMismatch(
            f"observation has {obs.increments.shape[0]} cells, control {u.u.shape[0]}"
        )
    return float(model.prior @ sol.y[0] - np.sum(u.u * obs.increments))


def verify_duality_principle(
    model: FiniteModel,
    f_terminal: np.ndarray,
    u: DeterministicControl,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    batch: int = 20000,
) -> CostReport:
    """Monte-Carlo check of J(u) = E|f(X_T) - S_T|^2.

    The left side is the exact quadrature cost; the right side averages
    over fresh (X, Z) samples. Streaming over batches keeps memory flat.
    """
    if n_paths < 100:
        raise ValueError("need at least 100 paths")
    f = np.asarray(f_terminal, dtype=float)
    sol = solve_backward_dual_ode(model, f, u, grid)
    base = exact_cost(model, sol, u, grid)

    intercept = float(model.prior @ sol.y[0])
    total = 0.0
    total_sq = 0.0
    for start in range(0, n_paths, batch):
        count = min(batch, n_paths - start)
        grid_states, dZ = simulate_batch(model, grid, seed, start, count)
        S = intercept - np.einsum("km,nkm->n", u.u, dZ)
        err = f[grid_states[:, -1]] - S
        sq = err * err
        total += sq.sum()
        total_sq += (sq * sq).sum()
    mean = total / n_paths
    var = max(total_sq / n_paths - mean * mean, 0.0)
    stderr = np.sqrt(var / n_paths)
    z = (mean - base.total) / stderr if stderr > 0 else 0.0
    return CostReport(
        var0=base.var0,
        running=base.running,
        total=base.total,
        mc_mean=float(mean),
        mc_stderr=float(stderr),
        z_score=float(z),
    )


def _cost_and_grad(
    model: FiniteModel,
    f: np.ndarray,
    u_flat: np.ndarray,
    grid: TimeGrid,
    rho: np.ndarray,
    M: np.ndarray,
    Phi: np.ndarray,
    Psi: np.ndarray,
):
    """Exact cost and its adjoint gradient for piecewise-constant control.

    M holds the trapezoid-weighted quadratic forms w_k * rho_k(Q); the
    gradient follows the discrete transfer maps y_k = Phi y_{k+1} + Psi u_k.
    """
    K, m = grid.steps, model.m
    dt = grid.dt
    u = u_flat.reshape(K, m)
    y = np.empty((K + 1, model.d))
    y[-1] = f
    for k in range(K - 1, -1, -1):
        y[k] = Phi @ y[k + 1] + Psi @ u[k]

    mu = model.prior
    Sigma0 = np.diag(mu) - np.outer(mu, mu)
    J = float(y[0] @ Sigma0 @ y[0])
    J += float(np.einsum("ki,kij,kj->", y, M, y))
    J += dt * float(np.sum(u * u))

    grad = np.empty_like(u)
    lam = 2.0 * (Sigma0 @ y[0] + M[0] @ y[0])
    grad[0] = Psi.T @ lam + 2.0 * dt * u[0]
    PhiT = Phi.T
    for k in range(1, K):
        lam = 2.0 * (M[k] @ y[k]) + PhiT @ lam
        grad[k] = Psi.T @ lam + 2.0 * dt * u[k]
    return J, grad.ravel()


def optimize_deterministic_control(
    model: FiniteModel,
    f_terminal: np.ndarray,
    grid: TimeGrid,
):
    """Minimize the exact quadrature cost over piecewise-constant u.

    The cost is a convex quadratic in u; solved by conjugate gradient on
    the normal equations with adjoint-computed gradients.
    """
    f = np.asarray(f_terminal, dtype=float)
    K, m = grid.steps, model.m
    rho = marginal_trajectory(model, grid)
    Q = gamma_matrices(model)
    w = np.full(K + 1, grid.dt)
    w[0] = w[-1] = grid.dt / 2.0
    M = np.stack([w[k] * combine_gamma(Q, rho[k]) for k in range(K + 1)])
    Phi, Psi = _rk4_cell_maps(model.rate_matrix, model.obs_matrix, grid.dt)

    n = K * m
    _, b = _cost_and_grad(model, f, np.zeros(n), grid, rho, M, Phi, Psi)

    def hess_vec(v):
        _, g = _cost_and_grad(model, f, v, grid, rho, M, Phi, Psi)
        return g - b

    op = LinearOperator((n, n), matvec=hess_vec)
    maxiter = 10 * n
    u_flat, info = cg(op, -b, rtol=1e-10, atol=0.0, maxiter=maxiter)
    J, g = _cost_and_grad(model, f, u_flat, grid, rho, M, Phi, Psi)
    if np.linalg.norm(g) > 1e-8 * (1.0 + abs(J)):
        if info > 0:
            raise MaxIterationsExceeded(
                f"CG stopped after {maxiter} iterations with gradient norm "
                f"{np.linalg.norm(g):.3e}"
            )
    u_star = DeterministicControl(u=u_flat.reshape(K, m))
    sol = solve_backward_dual_ode(model, f, u_star, grid)
    report = exact_cost(model, sol, u_star, grid, rho=rho)
    return u_star, report
