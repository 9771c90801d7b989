import json

import numpy as np
import pytest

from dualfilt import FiniteModel, LGModel, TimeGrid, validate_lg_model, validate_model


@pytest.fixture
def canon2():
    """Canonical symmetric 2-state chain observed through its second state."""
    return validate_model(
        FiniteModel(
            rate_matrix=np.array([[-1.0, 1.0], [1.0, -1.0]]),
            obs_matrix=np.array([[0.0], [1.0]]),
            prior=np.array([0.5, 0.5]),
        )
    )


@pytest.fixture
def model3():
    """Asymmetric 3-state chain with two observation channels."""
    A = np.array(
        [
            [-1.5, 1.0, 0.5],
            [0.3, -0.8, 0.5],
            [0.2, 1.1, -1.3],
        ]
    )
    H = np.array([[0.0, 1.0], [1.0, 0.0], [0.5, -0.5]])
    return validate_model(
        FiniteModel(rate_matrix=A, obs_matrix=H, prior=np.array([0.5, 0.3, 0.2]))
    )


@pytest.fixture
def lg_scalar():
    """Scalar canonical model A=0, sigma=1, H=1, Sigma0=1."""
    return validate_lg_model(
        LGModel(
            A=np.zeros((1, 1)),
            H=np.ones((1, 1)),
            sigma=np.ones((1, 1)),
            m0=np.zeros(1),
            Sigma0=np.ones((1, 1)),
        )
    )


@pytest.fixture
def grid100():
    return TimeGrid(horizon=1.0, steps=100)


def random_stable_lg(rng, d, m=None, p=None):
    """A stable LG model: A^T Hurwitz by diagonal shift."""
    m = m or rng.integers(1, d + 1)
    p = p or rng.integers(1, d + 1)
    M = rng.standard_normal((d, d))
    A = M - (np.abs(np.linalg.eigvals(M).real).max() + 0.5) * np.eye(d)
    L = rng.standard_normal((d, d)) * 0.5
    Sigma0 = L @ L.T + 0.1 * np.eye(d)
    return validate_lg_model(
        LGModel(
            A=A,
            H=rng.standard_normal((d, m)),
            sigma=rng.standard_normal((d, p)),
            m0=rng.standard_normal(d),
            Sigma0=Sigma0,
        )
    )


def write_model_json(path, model):
    if isinstance(model, FiniteModel):
        obj = {
            "d": model.d,
            "m": model.m,
            "A": model.rate_matrix.tolist(),
            "H": model.obs_matrix.tolist(),
            "prior": model.prior.tolist(),
        }
    else:
        obj = {
            "A": model.A.tolist(),
            "H": model.H.tolist(),
            "sigma": model.sigma.tolist(),
            "m0": model.m0.tolist(),
            "Sigma0": model.Sigma0.tolist(),
        }
    path.write_text(json.dumps(obj))
    return path
