"""Minimum-variance duality between nonlinear filtering and
BSDE-constrained stochastic control for finite-state hidden Markov
models, with exact linear-Gaussian specializations."""

from .errors import (
    DualfiltError,
    NumericalError,
    ValidationError,
)
from .models import (
    FiniteModel,
    LGModel,
    TimeGrid,
    finite_model_from_dict,
    lg_model_from_dict,
    load_model_file,
    validate_lg_model,
    validate_model,
)
from .hmm import (
    carre_du_champ,
    combine_gamma,
    expm,
    forward_marginal,
    gamma_matrices,
    marginal_trajectory,
    path_stream,
    simulate_observation_path,
    simulate_state_path,
)
from .filters import (
    FilterState,
    KalmanState,
    ZakaiState,
    conditional_variance,
    kalman_bucy_step,
    wonham_step,
    wonham_trajectory_ensemble,
    zakai_step,
)
from .ensemble import PathEnsemble, simulate_batch, simulate_ensemble
from .dual_det import (
    CostReport,
    DeterministicControl,
    DualOdeSolution,
    exact_cost,
    initial_variance,
    optimize_deterministic_control,
    solve_backward_dual_ode,
    terminal_estimator,
    verify_duality_principle,
)
from .lq import (
    MEDualSolution,
    MVDualSolution,
    min_energy_objective,
    mitter_newton_lg_decompose,
    recover_kalman_from_dual,
    run_kalman_filter,
    simulate_lg_path,
    solve_kalman_dre,
    solve_min_energy_dual,
    solve_min_variance_dual,
)
from .bsde import (
    DualTrajectory,
    GapReport,
    Policy,
    RegressionSpec,
    control_from_maximum_principle,
    costate_from_ansatz,
    duality_gap_report,
    lsmc_backward_solve,
    martingale_drift_check,
    optimal_feedback_control,
    prop1_trajectory_check,
)
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = [name for name in dir() if not name.startswith("_")]
