"""Batched joint sampling of (X, Z) paths and filter trajectories.

Batches index paths globally: path i always consumes the streams
(seed, i, role), so any chunking of an ensemble yields identical paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .filters import wonham_trajectory_ensemble
from .hmm import path_stream, simulate_observation_path, simulate_state_path
from .models import FiniteModel, TimeGrid


def simulate_batch(
    model: FiniteModel,
    grid: TimeGrid,
    seed: int,
    start: int,
    count: int,
):
    """Sample paths [start, start+count); returns (grid_states, dZ) with
    shapes (count, K+1) and (count, K, m)."""
    K, m = grid.steps, model.m
    grid_states = np.empty((count, K + 1), dtype=np.int64)
    dZ = np.empty((count, K, m))
    for j in range(count):
        i = start + j
        sp = simulate_state_path(model, grid, path_stream(seed, i, 0))
        op = simulate_observation_path(model, sp, grid, path_stream(seed, i, 1))
        grid_states[j] = sp.grid_states
        dZ[j] = op.increments
    return grid_states, dZ


@dataclass
class PathEnsemble:
    """Joint (X, Z, pi) sample over a grid.

    pi holds the normalized-filter trajectory; zakai_log_norm the factored
    log mass of the unnormalized filter along each path.
    """

    model: FiniteModel
    grid: TimeGrid
    seed: int
    grid_states: np.ndarray      # (N, K+1) int
    dZ: np.ndarray               # (N, K, m)
    pi: np.ndarray               # (N, K+1, d)
    zakai_log_norm: np.ndarray   # (N, K+1)

    @property
    def n_paths(self) -> int:
        return self.grid_states.shape[0]


def simulate_ensemble(
    model: FiniteModel,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    batch: int = 20000,
) -> PathEnsemble:
    """Simulate an ensemble with per-path streams and filter it."""
    parts_s, parts_z = [], []
    for start in range(0, n_paths, batch):
        count = min(batch, n_paths - start)
        gs, dZ = simulate_batch(model, grid, seed, start, count)
        parts_s.append(gs)
        parts_z.append(dZ)
    grid_states = np.concatenate(parts_s)
    dZ = np.concatenate(parts_z)
    pi, _ = wonham_trajectory_ensemble(model, dZ, grid.dt)
    log_norm = zakai_log_norm_ensemble(model, dZ, grid.dt)
    return PathEnsemble(
        model=model,
        grid=grid,
        seed=seed,
        grid_states=grid_states,
        dZ=dZ,
        pi=pi,
        zakai_log_norm=log_norm,
    )


def zakai_log_norm_ensemble(
    model: FiniteModel, dZ: np.ndarray, dt: float
) -> np.ndarray:
    """Accumulated log mass of the unnormalized filter, (N, K+1).

    Vectorized Euler recursion matching filters.zakai_step.
    """
    N, K, m = dZ.shape
    sig = np.broadcast_to(model.prior, (N, model.d)).copy()
    out = np.zeros((N, K + 1))
    AT = model.rate_matrix.T
    H = model.obs_matrix
    for k in range(K):
        new = sig + dt * (sig @ AT.T) + (dZ[:, k, :] @ H.T) * sig
        mass = new.sum(axis=1, keepdims=True)
        sig = new / mass
        out[:, k + 1] = out[:, k] + np.log(mass[:, 0])
    return out
