"""Stochastic dual control: least-squares Monte-Carlo BSDE solver with the
optimal feedback law, maximum-principle algebra, martingale diagnostics,
and duality-gap measurement.

Conditional expectations given the observation history are regressed on
polynomial features of the normalized filter state, which is a sufficient
statistic for this model class.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .ensemble import PathEnsemble, simulate_batch, simulate_ensemble
from .errors import (
    DegenerateMass,
    DimensionMismatch,
    FeatureCountTooLarge,
    IllConditionedRegression,
)
from .filters import wonham_trajectory_ensemble
from .models import FiniteModel, TimeGrid


# ---------------------------------------------------------------------------
# Pointwise algebra: feedback law, co-state ansatz, maximum principle


def optimal_feedback_control(pi, Y, V, H) -> np.ndarray:
    """U = -(pi(h Y) - pi(h) pi(Y)) - pi(V), batched over leading axes."""
    pi = np.asarray(pi, dtype=float)
    Y = np.asarray(Y, dtype=float)
    V = np.asarray(V, dtype=float)
    H = np.asarray(H, dtype=float)
    if pi.shape[-1] != H.shape[0] or Y.shape[-1] != H.shape[0]:
        raise DimensionMismatch("pi/Y length must match rows of H")
    piY = np.einsum("...i,...i->...", pi, Y)
    cov = np.einsum("...i,ik,...i->...k", pi, H, Y) - np.einsum(
        "...i,ik->...k", pi, H
    ) * piY[..., None]
    return -cov - np.einsum("...i,...ik->...k", pi, V)


def costate_from_ansatz(sigma_vec: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Co-state density against the unnormalized filter:
    P(i) = 2 sigma(i) (Y(i) - pi^T Y)."""
    s = np.asarray(sigma_vec, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if np.any(s <= 0):
        raise DegenerateMass("sigma_vec must have positive entries")
    pi = s / s.sum()
    return 2.0 * s * (Y - pi @ Y)


def control_from_maximum_principle(P, sigma_vec, V, H) -> np.ndarray:
    """U = -H^T P / (2 sigma(1)) - pi^T V, the stationary point of the
    Hamiltonian in the control argument."""
    P = np.asarray(P, dtype=float)
    s = np.asarray(sigma_vec, dtype=float)
    V = np.asarray(V, dtype=float)
    H = np.asarray(H, dtype=float)
    mass = s.sum()
    if not mass > 0:
        raise DegenerateMass("sigma_vec has nonpositive total mass")
    pi = s / mass
    return -(H.T @ P) / (2.0 * mass) - V.T @ pi


def hamiltonian_control_derivative(u, P, sigma_vec, V, H) -> np.ndarray:
    """Partial derivative of the Hamiltonian in u:
    -H^T P - 2 sigma(1) u - 2 V^T sigma; zero at the optimal control."""
    s = np.asarray(sigma_vec, dtype=float)
    return -(H.T @ P) - 2.0 * s.sum() * np.asarray(u) - 2.0 * (V.T @ s)


# ---------------------------------------------------------------------------
# Regression machinery


@dataclass(frozen=True)
class RegressionSpec:
    """Polynomial-in-pi regression basis: total degree `degree` over the
    first d-1 simplex coordinates, plus constant; ridge-stabilized."""

    degree: int = 2
    ridge: float = 1e-8


def poly_features(pi: np.ndarray, degree: int) -> np.ndarray:
    """Monomials of the first d-1 coordinates up to the total degree."""
    pi = np.atleast_2d(pi)
    coords = pi[:, :-1]
    cols = [np.ones(pi.shape[0])]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(
            range(coords.shape[1]), deg
        ):
            cols.append(np.prod(coords[:, combo], axis=1))
    return np.column_stack(cols)


def feature_count(d: int, degree: int) -> int:
    return poly_features(np.zeros((1, d)), degree).shape[1]


@dataclass(frozen=True)
class StepFit:
    """Standardized ridge fit shared by all targets at one time step."""

    keep: np.ndarray      # indices of non-degenerate feature columns
    mean: np.ndarray
    scale: np.ndarray
    coef: np.ndarray      # (1 + len(keep), n_targets)

    def predict(self, X: np.ndarray) -> np.ndarray:
        Xs = (X[:, self.keep] - self.mean) / self.scale
        return self.coef[0] + Xs @ self.coef[1:]


@dataclass(frozen=True)
class StepPair:
    """Conditional-mean fit and martingale-integrand fit at one step.

    The regressed martingale integrand is the cell average of V, an
    effective midpoint-in-time value; mart_next, when present, supports
    linear extrapolation back to the left grid time.
    """

    mean: StepFit
    mart: StepFit
    mart_next: StepFit | None = None


def fit_step(X: np.ndarray, targets: np.ndarray, ridge: float) -> StepFit:
    """QR-based ridge regression with feature standardization.

    Degenerate (zero-variance) columns are dropped; an intercept is always
    present so the k=0 step, where all paths share the same filter state,
    degrades gracefully to the ensemble mean.
    """
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    keep = np.flatnonzero(std > 1e-12 * (1.0 + np.abs(mean)))
    Xs = (X[:, keep] - mean[keep]) / std[keep]
    n, p = Xs.shape
    design = np.empty((n + p, p + 1))
    design[:n, 0] = 1.0
    design[:n, 1:] = Xs
    design[n:, 0] = 0.0
    design[n:, 1:] = np.sqrt(ridge) * np.eye(p)
    if p:
        cond = np.linalg.cond(design)
        if cond > 1e10:
            raise IllConditionedRegression(
                f"design condition number {cond:.3e} exceeds 1e10 after ridge"
            )
    rhs = np.vstack([targets, np.zeros((p, targets.shape[1]))])
    coef, *_ = scipy.linalg.lstsq(design, rhs, lapack_driver="gelsy")
    return StepFit(keep=keep, mean=mean[keep], scale=std[keep], coef=coef)


# ---------------------------------------------------------------------------
# Policies


@dataclass(frozen=True)
class Policy:
    """Control policy for the dual system.

    kind: 'optimal' (feedback law), 'open_loop' (deterministic u, (K, m)),
    or 'perturbed' (optimal plus a constant shift delta).
    """

    kind: str = "optimal"
    u: np.ndarray | None = None
    delta: float = 0.0

    def control(self, k, pi, Y_tilde, V, H) -> np.ndarray:
        if self.kind == "open_loop":
            return np.broadcast_to(self.u[k], (pi.shape[0], H.shape[1])).copy()
        U = optimal_feedback_control(pi, Y_tilde, V, H)
        if self.kind == "perturbed":
            U = U + self.delta
        elif self.kind != "optimal":
            raise ValueError(f"unknown policy kind {self.kind!r}")
        return U


# ---------------------------------------------------------------------------
# LSMC backward solve


def _cell_maps(A: np.ndarray, dt: float):
    """Fourth-order transfer maps for one backward cell: the drift step
    Y_k = Phi Y~ + Psi g with Phi ~ expm(dt A). A plain Euler step decays
    at rate log(1 - dt)/dt instead of -1 per unit rate, which biases the
    Gamma cost integral low by O(dt)."""
    d = A.shape[0]
    X = dt * A
    I = np.eye(d)
    Phi = I + X + X @ X / 2 + X @ X @ X / 6 + X @ X @ X @ X / 24
    Psi = dt * (I + X / 2 + X @ X / 6 + X @ X @ X / 24)
    return Phi, Psi


@dataclass
class BsdeFits:
    """Per-step regression fits defining the functions Y_k(pi), V_k(pi)."""

    model: FiniteModel
    grid: TimeGrid
    f_terminal: np.ndarray
    policy: Policy
    spec: RegressionSpec
    steps: list = field(default_factory=list)  # StepPair per k, index 0..K-1

    def __post_init__(self):
        self._phi, self._psi = _cell_maps(self.model.rate_matrix, self.grid.dt)

    def step_values(self, k: int, pi_k: np.ndarray):
        """(Y_tilde, V, U, Y) at step k for filter states pi_k (N, d)."""
        model = self.model
        d, m = model.d, model.m
        N = pi_k.shape[0]
        X = poly_features(pi_k, self.spec.degree)
        pair = self.steps[k]
        Y_tilde = pair.mean.predict(X)
        V = pair.mart.predict(X).reshape(N, d, m)
        if pair.mart_next is not None:
            # shift the midpoint-in-time value back to the grid time
            V = 1.5 * V - 0.5 * pair.mart_next.predict(X).reshape(N, d, m)

        def y_step(U):
            drift = U @ model.obs_matrix.T + np.einsum(
                "il,nil->ni", model.obs_matrix, V
            )
            return Y_tilde @ self._phi.T + drift @ self._psi.T

        U = self.policy.control(k, pi_k, Y_tilde, V, model.obs_matrix)
        # the feedback law wants Y at the cell's left time, not the
        # conditional mean of Y at the right time; one iteration suffices
        U = self.policy.control(k, pi_k, y_step(U), V, model.obs_matrix)
        Y = y_step(U)
        return Y_tilde, V, U, Y

    def initial_solution(self):
        """Deterministic (Y_0, V_0, U_0) evaluated at pi_0 = prior."""
        Y_tilde, V, U, Y = self.step_values(0, self.model.prior[None, :])
        return Y[0], V[0], U[0]


@dataclass
class DualTrajectory:
    """Pathwise BSDE solution and control along an ensemble."""

    Y: np.ndarray   # (N, K+1, d)
    V: np.ndarray   # (N, K, d, m)
    U: np.ndarray   # (N, K, m)
    fits: BsdeFits


def lsmc_fit(
    model: FiniteModel,
    f_terminal: np.ndarray,
    policy: Policy,
    ensemble: PathEnsemble,
    spec: RegressionSpec,
) -> BsdeFits:
    """Backward induction with per-step cross-path regressions.

    The conditional-expectation regression annihilates the martingale
    increment of the dual system, so the drift can be stepped explicitly
    at the regressed value.
    """
    f = np.asarray(f_terminal, dtype=float).reshape(model.d)
    grid = ensemble.grid
    N, K = ensemble.n_paths, grid.steps
    dt = grid.dt
    n_feat = feature_count(model.d, spec.degree)
    if n_feat > N / 10:
        raise FeatureCountTooLarge(
            f"{n_feat} features for {N} paths exceeds the N/10 budget"
        )

    fits = BsdeFits(
        model=model, grid=grid, f_terminal=f, policy=policy, spec=spec,
        steps=[None] * K,
    )
    d, m = model.d, model.m
    Y_next = np.broadcast_to(f, (N, d)).copy()
    for k in range(K - 1, -1, -1):
        X = poly_features(ensemble.pi[:, k, :], spec.degree)
        mean_fit = fit_step(X, Y_next, spec.ridge)
        Y_tilde = mean_fit.predict(X)
        # innovation increment: dZ has conditional mean pi(h) dt, which must
        # be removed or the V regression absorbs a Y pi(h)^T bias. Centering
        # Y_{k+1} at its regressed mean is a control variate: it cuts the
        # target variance from O(1/dt) to O(1) without changing the limit,
        # since E[Y_tilde(pi_k) innov | pi_k] = 0.
        innov = ensemble.dZ[:, k, :] - dt * (
            ensemble.pi[:, k, :] @ model.obs_matrix
        )
        resid = Y_next - Y_tilde
        vz = (resid[:, :, None] * innov[:, None, :] / dt).reshape(N, d * m)
        pilot = fit_step(X, vz, spec.ridge)
        # Second pass. The first target carries the chi-square fluctuation
        # of innov innov^T around dt I, which dominates its variance; the
        # pilot prediction strips it at O(dt) bias in V, so the refit has
        # coefficient noise small enough not to inflate pi(|U + V|^2).
        Vt = pilot.predict(X).reshape(N, d, m)
        proj = np.einsum("nil,nl->ni", Vt, innov)
        cv = proj[:, :, None] * innov[:, None, :] / dt - Vt
        v_fit = fit_step(X, vz - cv.reshape(N, d * m), spec.ridge)
        nxt = fits.steps[k + 1].mart if k + 1 < K else None
        fits.steps[k] = StepPair(mean=mean_fit, mart=v_fit, mart_next=nxt)
        _, _, _, Y_next = fits.step_values(k, ensemble.pi[:, k, :])
    return fits


def lsmc_backward_solve(
    model: FiniteModel,
    f_terminal: np.ndarray,
    policy: Policy,
    ensemble: PathEnsemble,
    spec: RegressionSpec,
) -> DualTrajectory:
    """LSMC solve returning the pathwise dual trajectory on the ensemble."""
    fits = lsmc_fit(model, f_terminal, policy, ensemble, spec)
    grid = ensemble.grid
    N, K, d, m = ensemble.n_paths, grid.steps, model.d, model.m
    Y = np.empty((N, K + 1, d))
    V = np.empty((N, K, d, m))
    U = np.empty((N, K, m))
    Y[:, K] = fits.f_terminal
    for k in range(K):
        _, V[:, k], U[:, k], Y[:, k] = fits.step_values(k, ensemble.pi[:, k, :])
    return DualTrajectory(Y=Y, V=V, U=U, fits=fits)


# ---------------------------------------------------------------------------
# Pathwise functionals


def _gamma_at_states(model: FiniteModel, Y: np.ndarray, states: np.ndarray):
    """(Gamma Y_p)(x_p) for pathwise function vectors Y (N, d)."""
    A_rows = model.rate_matrix[states]                 # (N, d)
    diff = Y[np.arange(Y.shape[0]), states][:, None] - Y
    return np.einsum("nj,nj->n", A_rows, diff * diff)


def _lagrangian(model: FiniteModel, Y, V, U, pi):
    """ell(Y, V, U; pi) = pi(Gamma Y) + pi(|U + V|^2), pathwise."""
    A = model.rate_matrix
    diff = Y[:, :, None] - Y[:, None, :]
    gy = np.einsum("ij,nij->ni", A, diff * diff)
    w = U[:, None, :] + V                              # (N, d, m)
    return np.einsum("ni,ni->n", pi, gy) + np.einsum(
        "ni,nim->n", pi, w * w
    )


def _conditional_variance_rows(pi: np.ndarray, Y: np.ndarray) -> np.ndarray:
    v = np.einsum("ni,ni->n", pi, Y * Y) - np.einsum("ni,ni->n", pi, Y) ** 2
    return np.maximum(v, 0.0)


# ---------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class GapReport:
    J_estimate: float
    J_stderr: float
    varT_estimate: float
    varT_stderr: float
    gap: float
    gap_stderr: float

    def as_dict(self) -> dict:
        return {
            "J_estimate": self.J_estimate,
            "J_stderr": self.J_stderr,
            "varT_estimate": self.varT_estimate,
            "varT_stderr": self.varT_stderr,
            "gap": self.gap,
            "gap_stderr": self.gap_stderr,
        }


@dataclass(frozen=True)
class DriftReport:
    per_step_mean: np.ndarray
    per_step_stderr: np.ndarray
    total_mean: float
    total_stderr: float


@dataclass(frozen=True)
class Prop1Report:
    rms: np.ndarray          # (K+1,) ensemble RMS residual per grid time
    max_rms: float


def pathwise_cost(
    fits: BsdeFits, grid_states: np.ndarray, dZ: np.ndarray, pi: np.ndarray
) -> np.ndarray:
    """Running dual cost along given paths: trapezoid quadrature of
    (Gamma Y_t)(X_t) + |U_t + V_t(X_t)|^2 sampled at grid times.

    A left-endpoint rule here biases the cost low by O(dt) because the
    integrand grows toward T; the trapezoid rule removes that term. The
    final grid time reuses the last cell's (U, V), a half-cell clamp.
    """
    model, grid = fits.model, fits.grid
    N, K = grid_states.shape[0], grid.steps
    cost = np.zeros(N)
    rows = np.arange(N)
    prev = None
    for k in range(K):
        _, V, U, Y = fits.step_values(k, pi[:, k, :])
        g = _gamma_at_states(model, Y, grid_states[:, k])
        w = U + V[rows, grid_states[:, k], :]
        a = g + np.einsum("nm,nm->n", w, w)
        if prev is not None:
            cost += 0.5 * grid.dt * (prev + a)
        prev = a
        if k == K - 1:
            Y_T = np.broadcast_to(fits.f_terminal, (N, model.d))
            g = _gamma_at_states(model, Y_T, grid_states[:, K])
            w = U + V[rows, grid_states[:, K], :]
            a = g + np.einsum("nm,nm->n", w, w)
            cost += 0.5 * grid.dt * (prev + a)
    return cost


def initial_variance_from_fits(fits: BsdeFits) -> float:
    mu = fits.model.prior
    Y0, _, _ = fits.initial_solution()
    return float(mu @ (Y0 * Y0) - (mu @ Y0) ** 2)


def duality_gap_report(
    model: FiniteModel,
    f_terminal: np.ndarray,
    policy: Policy,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    spec: RegressionSpec,
    batch: int = 20000,
) -> GapReport:
    """Gap between the dual cost of the LSMC policy and the conditional
    variance, both by Monte Carlo.

    Training, cost evaluation, and variance estimation use disjoint path
    index ranges of the same master seed, hence independent samples.
    """
    if n_paths < 1000:
        raise ValueError("need at least 1000 paths")
    train = simulate_ensemble(model, grid, n_paths, seed)
    fits = lsmc_fit(model, f_terminal, policy, train, spec)
    del train
    var0 = initial_variance_from_fits(fits)

    # fresh-ensemble running cost, paths [n, 2n)
    total = total_sq = 0.0
    for start in range(n_paths, 2 * n_paths, batch):
        count = min(batch, 2 * n_paths - start)
        gs, dZ = simulate_batch(model, grid, seed, start, count)
        pi, _ = wonham_trajectory_ensemble(model, dZ, grid.dt)
        c = pathwise_cost(fits, gs, dZ, pi)
        total += c.sum()
        total_sq += (c * c).sum()
    mean_c = total / n_paths
    var_c = max(total_sq / n_paths - mean_c * mean_c, 0.0)
    J_est = var0 + mean_c
    J_se = float(np.sqrt(var_c / n_paths))

    # independent conditional-variance estimate, paths [2n, 3n)
    f = fits.f_terminal
    total = total_sq = 0.0
    for start in range(2 * n_paths, 3 * n_paths, batch):
        count = min(batch, 3 * n_paths - start)
        _, dZ = simulate_batch(model, grid, seed, start, count)
        piT, _ = wonham_trajectory_ensemble(model, dZ, grid.dt, stride=grid.steps)
        v = piT[:, -1, :] @ (f * f) - (piT[:, -1, :] @ f) ** 2
        total += v.sum()
        total_sq += (v * v).sum()
    varT = total / n_paths
    varT_var = max(total_sq / n_paths - varT * varT, 0.0)
    varT_se = float(np.sqrt(varT_var / n_paths))

    return GapReport(
        J_estimate=float(J_est),
        J_stderr=J_se,
        varT_estimate=float(varT),
        varT_stderr=varT_se,
        gap=float(J_est - varT),
        gap_stderr=float(np.hypot(J_se, varT_se)),
    )


def _drift_increments(fits: BsdeFits, pi: np.ndarray) -> np.ndarray:
    """Pathwise increments of M on one evaluated ensemble, (N, K)."""
    model, grid = fits.model, fits.grid
    K, dt = grid.steps, grid.dt
    N = pi.shape[0]
    out = np.empty((N, K))
    _, V, U, Y = fits.step_values(0, pi[:, 0, :])
    vprev = _conditional_variance_rows(pi[:, 0, :], Y)
    ell_prev = _lagrangian(model, Y, V, U, pi[:, 0, :])
    for k in range(K):
        if k + 1 < K:
            _, V, U, Y_next = fits.step_values(k + 1, pi[:, k + 1, :])
        else:
            # clamp (U, V) to the last cell at the terminal time
            Y_next = np.broadcast_to(fits.f_terminal, (N, model.d))
        ell_next = _lagrangian(model, Y_next, V, U, pi[:, k + 1, :])
        vnext = _conditional_variance_rows(pi[:, k + 1, :], Y_next)
        # trapezoid in ell: a left-endpoint rule biases the drift positive
        out[:, k] = vnext - vprev - 0.5 * dt * (ell_prev + ell_next)
        vprev, ell_prev = vnext, ell_next
    return out


def martingale_drift_check(
    model: FiniteModel,
    f_terminal: np.ndarray,
    policy: Policy,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    spec: RegressionSpec,
) -> DriftReport:
    """Per-step drift of M_t = V_t(Y_t) - int ell(Y, V, U; pi) ds.

    Zero drift within noise characterizes the optimal control; any other
    policy drifts down by -|U - U_opt|^2 per unit time.

    Fits are trained on the first half of the path budget and the drift
    increments are averaged on the disjoint second half, so the pathwise
    stderrs are honest: the evaluation paths never see the regression
    targets. Coefficient noise in the fits remains a fixed offset per
    training realization, but the two-pass martingale regression keeps
    it below the stderr floor.
    """
    f = np.asarray(f_terminal, dtype=float).reshape(model.d)
    half = n_paths // 2
    if half < 10 * feature_count(model.d, spec.degree):
        raise FeatureCountTooLarge(
            f"training set of {half} paths too small for the regression basis"
        )
    train = _sub_ensemble(model, grid, seed, 0, half)
    fits = lsmc_fit(model, f, policy, train, spec)
    del train
    ev = _sub_ensemble(model, grid, seed, half, half)
    incr = _drift_increments(fits, ev.pi)
    tot = incr.sum(axis=1)
    return DriftReport(
        per_step_mean=incr.mean(axis=0),
        per_step_stderr=incr.std(axis=0, ddof=1) / np.sqrt(half),
        total_mean=float(tot.mean()),
        total_stderr=float(tot.std(ddof=1) / np.sqrt(half)),
    )


def _sub_ensemble(model, grid, seed, start, count) -> PathEnsemble:
    gs, dZ = simulate_batch(model, grid, seed, start, count)
    pi, _ = wonham_trajectory_ensemble(model, dZ, grid.dt)
    return PathEnsemble(
        model=model, grid=grid, seed=seed, grid_states=gs, dZ=dZ, pi=pi,
        zakai_log_norm=np.zeros((count, grid.steps + 1)),
    )


def prop1_trajectory_check(
    model: FiniteModel,
    f_terminal: np.ndarray,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    spec: RegressionSpec,
    ensemble: PathEnsemble | None = None,
) -> Prop1Report:
    """Residuals of pi_t(Y_t) = mu(Y_0) - int_0^t U^T dZ under the optimal
    policy; ensemble RMS per grid time."""
    if ensemble is None:
        ensemble = simulate_ensemble(model, grid, n_paths, seed)
    fits = lsmc_fit(model, f_terminal, Policy(kind="optimal"), ensemble, spec)
    K = grid.steps
    N = ensemble.n_paths
    mu = model.prior
    Y0, _, _ = fits.initial_solution()
    intercept = float(mu @ Y0)

    rms = np.empty(K + 1)
    stoch_int = np.zeros(N)
    for k in range(K + 1):
        if k < K:
            _, _, U, Y = fits.step_values(k, ensemble.pi[:, k, :])
        else:
            Y = np.broadcast_to(fits.f_terminal, (N, model.d))
        res = np.einsum("ni,ni->n", ensemble.pi[:, k, :], Y) - (
            intercept - stoch_int
        )
        rms[k] = np.sqrt(np.mean(res * res))
        if k < K:
            stoch_int += np.einsum("nm,nm->n", U, ensemble.dZ[:, k, :])
    return Prop1Report(rms=rms, max_rms=float(rms.max()))
