"""Pure-numpy ensemble kernel for the clipped-Euler normalized filter.

Vectorized across paths; the compiled twin in _wonham_cy.pyx implements
the same recursion with explicit loops. Both must agree to roundoff
(asserted in tests/test_kernels.py).
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateMass

MASS_FLOOR = 1e-14


def wonham_ensemble(
    A: np.ndarray,
    H: np.ndarray,
    pi0: np.ndarray,
    dZ: np.ndarray,
    dt: float,
    stride: int = 1,
):
    """Run the predictor-corrector filter step over an ensemble.

    Parameters
    ----------
    A : (d, d) rate matrix, H : (d, m) observation matrix.
    pi0 : (d,) or (N, d) initial simplex state(s).
    dZ : (N, K, m) observation increments.
    stride : store every stride-th grid point (K must be divisible).

    Returns
    -------
    pi_traj : (N, K//stride + 1, d) filter states at stored times.
    n_clipped : total count of negative-probability clip events.
    """
    N, K, m = dZ.shape
    d = A.shape[0]
    if K % stride != 0:
        raise ValueError("stride must divide the number of steps")
    pi = np.broadcast_to(np.asarray(pi0, dtype=float), (N, d)).copy()
    out = np.empty((N, K // stride + 1, d))
    out[:, 0] = pi
    n_clipped = 0
    for k in range(K):
        pred = pi + dt * (pi @ A)
        hbar = pred @ H                              # (N, m)
        innov = dZ[:, k, :] - hbar * dt              # (N, m)
        coef = innov @ H.T - (innov * hbar).sum(axis=1, keepdims=True)
        pi = pred * (1.0 + coef)
        neg = pi < 0.0
        if neg.any():
            n_clipped += int(neg.sum())
            pi[neg] = 0.0
        mass = pi.sum(axis=1, keepdims=True)
        if np.any(mass < MASS_FLOOR):
            raise DegenerateMass(
                f"filter mass collapsed below {MASS_FLOOR} at step {k}"
            )
        pi /= mass
        if (k + 1) % stride == 0:
            out[:, (k + 1) // stride] = pi
    return out, n_clipped
