"""Model containers: finite-state HMM, linear-Gaussian model, time grid.

Finite-state conventions: the rate matrix A has nonnegative off-diagonal
entries and zero row sums; a real function on the state space is a
d-vector; the observation matrix H is d x m with columns acting as the
observation functions.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigParseError,
    InvalidSimplex,
    NegativeRate,
    NonFinite,
    RowSumViolation,
)

ROW_SUM_TOL = 1e-12
SIMPLEX_TOL = 1e-12
SIMPLEX_RENORM_TOL = 1e-10


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, horizon] with `steps` cells."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (self.horizon > 0 and np.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


@dataclass(frozen=True)
class FiniteModel:
    """Finite-state HMM: rate matrix, observation matrix, prior.

    Attributes
    ----------
    rate_matrix : (d, d) array
        Generator A; off-diagonal rates >= 0, zero row sums.
    obs_matrix : (d, m) array
        Observation functions as columns.
    prior : (d,) array
        Initial distribution on the simplex.
    """

    rate_matrix: np.ndarray
    obs_matrix: np.ndarray
    prior: np.ndarray

    @property
    def d(self) -> int:
        return self.rate_matrix.shape[0]

    @property
    def m(self) -> int:
        return self.obs_matrix.shape[1]


@dataclass(frozen=True)
class LGModel:
    """Linear-Gaussian model dX = A^T X dt + sigma dB, dZ = H^T X dt + dW."""

    A: np.ndarray
    H: np.ndarray
    sigma: np.ndarray
    m0: np.ndarray
    Sigma0: np.ndarray

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[1]

    @property
    def p(self) -> int:
        return self.sigma.shape[1]


def validate_model(model: FiniteModel) -> FiniteModel:
    """Check FiniteModel invariants, returning the model on success.

    Raises RowSumViolation, NegativeRate, InvalidSimplex, or NonFinite.
    A prior that is off the simplex by at most 1e-10 is renormalized with
    a warning; larger drift is a hard error.
    """
    A = np.asarray(model.rate_matrix, dtype=float)
    H = np.asarray(model.obs_matrix, dtype=float)
    mu = np.asarray(model.prior, dtype=float)

    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NonFinite(f"rate matrix must be square, got shape {A.shape}")
    d = A.shape[0]
    if d < 2:
        raise NonFinite(f"need at least 2 states, got d={d}")
    if H.ndim != 2 or H.shape[0] != d or H.shape[1] < 1:
        raise NonFinite(f"obs matrix shape {H.shape} incompatible with d={d}")
    if mu.shape != (d,):
        raise InvalidSimplex(f"prior shape {mu.shape} incompatible with d={d}")
    for name, arr in (("rate matrix", A), ("obs matrix", H), ("prior", mu)):
        if not np.all(np.isfinite(arr)):
            raise NonFinite(f"{name} contains non-finite entries")

    off = A - np.diag(np.diag(A))
    if np.any(off < 0):
        i, j = np.argwhere(off < 0)[0]
        raise NegativeRate(f"negative off-diagonal rate A[{i},{j}] = {A[i, j]}")
    row_sums = A.sum(axis=1)
    bad = np.abs(row_sums) > ROW_SUM_TOL
    if np.any(bad):
        i = int(np.argmax(bad))
        raise RowSumViolation(f"row {i} of rate matrix sums to {row_sums[i]:.3e}")

    if np.any(mu < -SIMPLEX_TOL):
        raise InvalidSimplex(f"prior has negative entries: {mu}")
    drift = abs(mu.sum() - 1.0)
    if drift > SIMPLEX_RENORM_TOL:
        raise InvalidSimplex(f"prior sums to {mu.sum()!r}")
    if drift > SIMPLEX_TOL:
        warnings.warn(f"prior off the simplex by {drift:.2e}; renormalizing")
        object.__setattr__(model, "prior", mu / mu.sum())
    return model


def validate_lg_model(lg: LGModel) -> LGModel:
    """Check LGModel shape and symmetry invariants."""
    d = lg.A.shape[0]
    if lg.A.shape != (d, d):
        raise NonFinite(f"A must be square, got {lg.A.shape}")
    if lg.H.shape[0] != d or lg.sigma.shape[0] != d:
        raise NonFinite("H and sigma must have d rows")
    if lg.m0.shape != (d,) or lg.Sigma0.shape != (d, d):
        raise NonFinite("m0 / Sigma0 dimensions inconsistent with A")
    for name, arr in (("A", lg.A), ("H", lg.H), ("sigma", lg.sigma),
                      ("m0", lg.m0), ("Sigma0", lg.Sigma0)):
        if not np.all(np.isfinite(arr)):
            raise NonFinite(f"{name} contains non-finite entries")
    if np.max(np.abs(lg.Sigma0 - lg.Sigma0.T)) > 1e-12:
        raise NonFinite("Sigma0 not symmetric within 1e-12")
    if np.min(np.linalg.eigvalsh((lg.Sigma0 + lg.Sigma0.T) / 2)) < -1e-12:
        raise NonFinite("Sigma0 has eigenvalues below -1e-12")
    return lg


def finite_model_from_dict(obj: dict) -> FiniteModel:
    """Build a validated FiniteModel from the JSON schema
    {"d", "m", "A": row-major, "H": row-major, "prior"}."""
    try:
        d = int(obj["d"])
        m = int(obj["m"])
        A = np.asarray(obj["A"], dtype=float).reshape(d, d)
        H = np.asarray(obj["H"], dtype=float).reshape(d, m)
        mu = np.asarray(obj["prior"], dtype=float).reshape(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigParseError(f"bad finite model object: {exc}") from exc
    return validate_model(FiniteModel(rate_matrix=A, obs_matrix=H, prior=mu))


def lg_model_from_dict(obj: dict) -> LGModel:
    """Build a validated LGModel from {"A","H","sigma","m0","Sigma0"}."""
    try:
        A = np.atleast_2d(np.asarray(obj["A"], dtype=float))
        d = A.shape[0]
        A = A.reshape(d, d)
        H = np.asarray(obj["H"], dtype=float).reshape(d, -1)
        sigma = np.asarray(obj["sigma"], dtype=float).reshape(d, -1)
        m0 = np.asarray(obj["m0"], dtype=float).reshape(d)
        Sigma0 = np.asarray(obj["Sigma0"], dtype=float).reshape(d, d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigParseError(f"bad LG model object: {exc}") from exc
    return validate_lg_model(LGModel(A=A, H=H, sigma=sigma, m0=m0, Sigma0=Sigma0))


def load_model_file(path: str):
    """Load a model JSON file; returns FiniteModel or LGModel by schema."""
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigParseError(f"cannot read model file {path}: {exc}") from exc
    if "prior" in obj:
        return finite_model_from_dict(obj)
    if "Sigma0" in obj:
        return lg_model_from_dict(obj)
    raise ConfigParseError(f"{path}: neither a finite-model nor an LG-model object")
