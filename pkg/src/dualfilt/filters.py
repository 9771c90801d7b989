"""Primal-side filters: normalized (Wonham) and unnormalized (Zakai)
finite-state filters, the Kalman-Bucy filter, and conditional-variance
functionals used as duality oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CovarianceBlowup, DegenerateMass, DimensionMismatch
from .models import FiniteModel, LGModel
from ._wonham_np import MASS_FLOOR, wonham_ensemble as _wonham_np_ensemble
from . import kernels


@dataclass(frozen=True)
class FilterState:
    """Normalized filter state on the simplex."""

    pi: np.ndarray


@dataclass(frozen=True)
class ZakaiState:
    """Mass-normalized unnormalized filter plus the factored log mass.

    The true unnormalized vector is exp(log_norm) * sigma_unnorm where
    sigma_unnorm is kept at unit total mass for overflow safety.
    """

    sigma_unnorm: np.ndarray
    log_norm: float


@dataclass(frozen=True)
class KalmanState:
    mean: np.ndarray
    cov: np.ndarray


def wonham_step(
    model: FiniteModel, state: FilterState, dZ: np.ndarray, dt: float
) -> FilterState:
    """One clipped predictor-corrector Euler step of the normalized filter."""
    pi = state.pi[None, :]
    dZ = np.asarray(dZ, dtype=float).reshape(1, 1, model.m)
    traj, _ = _wonham_np_ensemble(model.rate_matrix, model.obs_matrix, pi, dZ, dt)
    return FilterState(pi=traj[0, -1])


def wonham_trajectory_ensemble(
    model: FiniteModel, dZ: np.ndarray, dt: float, stride: int = 1
):
    """Filter an ensemble of observation increments, (N, K, m) -> (N, K'+1, d).

    Dispatches to the compiled kernel when available.
    """
    return kernels.wonham_ensemble(
        model.rate_matrix, model.obs_matrix, model.prior, dZ, dt, stride
    )


def zakai_step(
    model: FiniteModel, state: ZakaiState, dZ: np.ndarray, dt: float
) -> ZakaiState:
    """Euler step of d sigma = A^T sigma dt + sum_k diag(H e_k) sigma dZ_k,
    factoring the total mass into log_norm after the step."""
    sig = state.sigma_unnorm
    dZ = np.asarray(dZ, dtype=float).reshape(model.m)
    new = sig + dt * (model.rate_matrix.T @ sig) + (model.obs_matrix @ dZ) * sig
    mass = new.sum()
    if not (mass > MASS_FLOOR):
        raise DegenerateMass(f"Zakai mass {mass} below floor")
    return ZakaiState(sigma_unnorm=new / mass, log_norm=state.log_norm + np.log(mass))


def _riccati_rhs(lg: LGModel, S: np.ndarray) -> np.ndarray:
    return (
        lg.A.T @ S + S @ lg.A + lg.sigma @ lg.sigma.T - S @ lg.H @ lg.H.T @ S
    )


def riccati_rk4_step(lg: LGModel, S: np.ndarray, dt: float) -> np.ndarray:
    """One RK4 step of the covariance DRE, symmetrized."""
    k1 = _riccati_rhs(lg, S)
    k2 = _riccati_rhs(lg, S + 0.5 * dt * k1)
    k3 = _riccati_rhs(lg, S + 0.5 * dt * k2)
    k4 = _riccati_rhs(lg, S + dt * k3)
    S_new = S + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    S_new = 0.5 * (S_new + S_new.T)
    if np.linalg.norm(S_new) > 1e12:
        raise CovarianceBlowup("Riccati covariance norm exceeded 1e12")
    return S_new


def kalman_bucy_step(
    lg: LGModel, state: KalmanState, dZ: np.ndarray, dt: float
) -> KalmanState:
    """dm = A^T m dt + Sigma H (dZ - H^T m dt); covariance via RK4."""
    m, S = state.mean, state.cov
    dZ = np.asarray(dZ, dtype=float).reshape(lg.m)
    innov = dZ - lg.H.T @ m * dt
    m_new = m + dt * (lg.A.T @ m) + S @ lg.H @ innov
    return KalmanState(mean=m_new, cov=riccati_rk4_step(lg, S, dt))


def conditional_variance(pi, f: np.ndarray) -> float:
    """pi(f^2) - pi(f)^2, clamped at zero against roundoff."""
    if isinstance(pi, FilterState):
        pi = pi.pi
    pi = np.asarray(pi, dtype=float)
    f = np.asarray(f, dtype=float)
    if pi.shape[-1] != f.shape[0]:
        raise DimensionMismatch(f"pi has {pi.shape[-1]} states, f has {f.shape[0]}")
    v = pi @ (f * f) - (pi @ f) ** 2
    return float(max(v, 0.0)) if np.ndim(v) == 0 else np.maximum(v, 0.0)
