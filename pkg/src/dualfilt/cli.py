"""Reproducible experiment runner.

Subcommands dispatch to the library modules and emit JSON reports that
contain the full resolved configuration, a content hash of the inputs,
and the wall clock. The only non-deterministic field is the top-level
"timestamp" object (start time and wall clock); everything else is
byte-identical across runs with the same config and seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import bsde, dual_det, kernels, lq
from .ensemble import simulate_batch, simulate_ensemble
from .errors import (
    ConfigParseError,
    NumericalError,
    ValidationError,
)
from .filters import wonham_trajectory_ensemble
from .hmm import forward_marginal, path_stream
from .models import (
    FiniteModel,
    LGModel,
    TimeGrid,
    finite_model_from_dict,
    lg_model_from_dict,
    load_model_file,
)


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _load_config(args):
    """Resolve the experiment config: a bare model object or a wrapper
    {"model": <object or file path>, "grid": {"T", "K"}, ...}."""
    if args.config is None:
        raise ConfigParseError("--config is required for this subcommand")
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigParseError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigParseError("config must be a JSON object")

    if "model" in raw:
        spec = raw["model"]
        if isinstance(spec, str):
            model = load_model_file(spec)
        elif isinstance(spec, dict):
            model = (
                finite_model_from_dict(spec)
                if "prior" in spec
                else lg_model_from_dict(spec)
            )
        else:
            raise ConfigParseError("config 'model' must be an object or a path")
        extra = {k: v for k, v in raw.items() if k != "model"}
    elif "prior" in raw:
        model, extra = finite_model_from_dict(raw), {}
    elif "Sigma0" in raw:
        model, extra = lg_model_from_dict(raw), {}
    else:
        raise ConfigParseError(
            f"{args.config}: not a model object and no 'model' key"
        )

    grid_obj = extra.get("grid", {})
    horizon = float(grid_obj.get("T", 1.0))
    steps = args.steps if args.steps is not None else int(grid_obj.get("K", 200))
    grid = TimeGrid(horizon=horizon, steps=steps)
    return model, grid, extra


def _resolved_config(args, model, grid, **extra) -> dict:
    if isinstance(model, FiniteModel):
        model_obj = {
            "kind": "finite",
            "d": model.d,
            "m": model.m,
            "A": model.rate_matrix.tolist(),
            "H": model.obs_matrix.tolist(),
            "prior": model.prior.tolist(),
        }
    else:
        model_obj = {
            "kind": "linear_gaussian",
            "A": model.A.tolist(),
            "H": model.H.tolist(),
            "sigma": model.sigma.tolist(),
            "m0": model.m0.tolist(),
            "Sigma0": model.Sigma0.tolist(),
        }
    cfg = {
        "config_file": args.config,
        "model": model_obj,
        "grid": {"T": grid.horizon, "K": grid.steps},
        "seed": args.seed,
        "paths": args.paths,
        "threads": args.threads,
        "backend": kernels.BACKEND,
    }
    cfg.update(_jsonable(extra))
    return cfg


def _emit(args, payload: dict, config: dict, started: float, stamp: str) -> None:
    report = {
        "timestamp": {
            "start": stamp,
            "wall_clock_seconds": time.monotonic() - started,
        },
        "config": config,
        "input_sha256": _sha256_file(args.config) if args.config else None,
    }
    report.update(_jsonable(payload))
    text = json.dumps(report, indent=2, sort_keys=False) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _parse_vector(text: str, name: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in text.split(",")], dtype=float)
    except ValueError as exc:
        raise ConfigParseError(f"cannot parse {name} vector {text!r}") from exc


def _terminal_vector(args, model, extra) -> np.ndarray:
    text = args.terminal or extra.get("terminal")
    if text is None:
        raise ConfigParseError("terminal vector required (--terminal or config)")
    if isinstance(text, str):
        f = _parse_vector(text, "terminal")
    else:
        f = np.asarray(text, dtype=float)
    if f.shape != (model.d,):
        raise ConfigParseError(f"terminal vector has {f.size} entries, need {model.d}")
    return f


def _require_finite(model):
    if not isinstance(model, FiniteModel):
        raise ConfigParseError("this subcommand needs a finite-state model")
    return model


def _require_lg(model):
    if not isinstance(model, LGModel):
        raise ConfigParseError("this subcommand needs a linear-Gaussian model")
    return model


def _policy_from_args(args, grid, m) -> bsde.Policy:
    if args.policy == "optimal":
        return bsde.Policy(kind="optimal")
    if args.policy == "perturbed":
        return bsde.Policy(kind="perturbed", delta=args.delta)
    if args.policy == "open_loop":
        value = _parse_vector(args.control or "0", "control")
        u = np.tile(value.reshape(1, -1), (grid.steps, 1))
        if u.shape[1] != m:
            raise ConfigParseError(f"control has {u.shape[1]} channels, need {m}")
        return bsde.Policy(kind="open_loop", u=u)
    raise ConfigParseError(f"unknown policy {args.policy!r}")


def _lg_observation(args, lg, grid):
    """Observation increments from --path CSV or simulated from the seed."""
    if args.path:
        with open(args.path) as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("t")]
        dZ = np.array([[float(x) for x in r[1:]] for r in rows])
        if dZ.shape != (grid.steps, lg.m):
            raise ConfigParseError(
                f"path CSV shape {dZ.shape} != ({grid.steps}, {lg.m})"
            )
        return None, dZ
    X, dZ = lq.simulate_lg_path(
        lg, grid, path_stream(args.seed, 0, 0), path_stream(args.seed, 0, 1)
    )
    return X, dZ


# ---------------------------------------------------------------------------
# Subcommand bodies


def _cmd_model_validate(args):
    model, grid, extra = _load_config(args)
    kind = "finite" if isinstance(model, FiniteModel) else "linear_gaussian"
    payload = {"valid": True, "kind": kind}
    if isinstance(model, FiniteModel):
        payload.update(d=model.d, m=model.m)
    else:
        payload.update(d=model.d, m=model.m, p=model.p)
    return payload, model, grid, {}


def _cmd_simulate(args):
    model, grid, extra = _load_config(args)
    if isinstance(model, FiniteModel):
        gs, dZ = simulate_batch(model, grid, args.seed, 0, args.paths)
        freq = np.bincount(gs[:, -1], minlength=model.d) / args.paths
        payload = {
            "kind": "finite",
            "terminal_state_frequency": freq,
            "terminal_marginal": forward_marginal(model, grid.horizon),
            "dZ_mean": dZ.mean(axis=(0, 1)),
        }
        if args.out and args.out.endswith(".csv"):
            with open(args.out, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(
                    ["t", "path_id", "state"]
                    + [f"dZ_{l + 1}" for l in range(model.m)]
                )
                for i in range(args.paths):
                    for k in range(grid.steps):
                        w.writerow(
                            [grid.times[k], i, gs[i, k]] + list(dZ[i, k])
                        )
            payload["csv"] = args.out
            args.out = None
    else:
        X, dZ = _lg_observation(args, model, grid)
        payload = {
            "kind": "linear_gaussian",
            "terminal_state": X[-1] if X is not None else None,
            "dZ_sum": dZ.sum(axis=0),
        }
        if args.out and args.out.endswith(".csv"):
            with open(args.out, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["t"] + [f"dZ_{l + 1}" for l in range(model.m)])
                for k in range(grid.steps):
                    w.writerow([grid.times[k]] + list(dZ[k]))
            payload["csv"] = args.out
            args.out = None
    return payload, model, grid, {}


def _cmd_filter(args):
    model, grid, extra = _load_config(args)
    if args.filter_kind == "wonham":
        _require_finite(model)
        gs, dZ = simulate_batch(model, grid, args.seed, 0, args.paths)
        pi, n_clipped = wonham_trajectory_ensemble(model, dZ, grid.dt)
        payload = {
            "filter": "wonham",
            "mean_terminal_pi": pi[:, -1, :].mean(axis=0),
            "terminal_marginal": forward_marginal(model, grid.horizon),
            "clip_events": int(n_clipped),
        }
        if args.out and args.out.endswith(".csv"):
            _dump_pi_csv(args.out, grid, pi)
            payload["csv"] = args.out
            args.out = None
    else:
        lg = _require_lg(model)
        _, dZ = _lg_observation(args, lg, grid)
        means, covs = lq.run_kalman_filter(lg, dZ, grid)
        payload = {
            "filter": "kalman",
            "terminal_mean": means[-1],
            "terminal_cov": covs[-1],
        }
        if args.out and args.out.endswith(".csv"):
            with open(args.out, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(
                    ["t"]
                    + [f"m_{i + 1}" for i in range(lg.d)]
                    + [f"Sigma_{i + 1}{i + 1}" for i in range(lg.d)]
                )
                for k in range(grid.steps + 1):
                    w.writerow(
                        [grid.times[k]] + list(means[k]) + list(np.diag(covs[k]))
                    )
            payload["csv"] = args.out
            args.out = None
    return payload, model, grid, {}


def _dump_pi_csv(path, grid, pi):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = pi.shape[2]
        w.writerow(["t", "path_id"] + [f"pi_{i + 1}" for i in range(d)])
        for i in range(pi.shape[0]):
            for k in range(grid.steps + 1):
                w.writerow([grid.times[k], i] + list(pi[i, k]))


def _cmd_dual(args):
    model, grid, extra = _load_config(args)
    sub = args.dual_kind
    if sub == "det-check":
        model = _require_finite(model)
        f = _terminal_vector(args, model, extra)
        value = _parse_vector(args.control or "0", "control")
        u = dual_det.DeterministicControl.constant(grid, np.resize(value, model.m))
        report = dual_det.verify_duality_principle(
            model, f, u, grid, args.paths, args.seed
        )
        return report.as_dict(), model, grid, {"terminal": f, "control": value}
    if sub == "det-opt":
        model = _require_finite(model)
        f = _terminal_vector(args, model, extra)
        u_star, report = dual_det.optimize_deterministic_control(model, f, grid)
        payload = report.as_dict()
        payload["u_norm"] = float(np.linalg.norm(u_star.u))
        payload["u_first"] = u_star.u[0]
        payload["u_last"] = u_star.u[-1]
        return payload, model, grid, {"terminal": f}
    if sub == "lq":
        lg = _require_lg(model)
        f = _terminal_vector(args, lg, extra)
        sol = lq.solve_min_variance_dual(lg, f, grid)
        payload = {
            "value": sol.value,
            "certificate": sol.certificate,
            "gap": sol.value - sol.certificate,
            "y0": sol.y[0],
        }
        return payload, lg, grid, {"terminal": f}
    if sub == "mee":
        lg = _require_lg(model)
        _, dZ = _lg_observation(args, lg, grid)
        med = lq.solve_min_energy_dual(lg, dZ, grid)
        means, _ = lq.run_kalman_filter(lg, dZ, grid)
        payload = {
            "value": med.value,
            "m_tilde_0": med.m_tilde_0,
            "m_tilde_T": med.m_tilde[-1],
            "kalman_m_T": means[-1],
            "terminal_gap": float(np.max(np.abs(med.m_tilde[-1] - means[-1]))),
        }
        return payload, lg, grid, {"path": args.path}
    if sub == "mn-compare":
        lg = _require_lg(model)
        _, dZ = _lg_observation(args, lg, grid)
        med = lq.solve_min_energy_dual(lg, dZ, grid)
        gain = np.zeros((grid.steps, lg.p, lg.d))
        J1, J2 = lq.mitter_newton_lg_decompose(
            lg, dZ, med.m_tilde_0, med.u, gain, grid
        )
        payload = {
            "J1": J1,
            "J2": J2,
            "min_energy_value": med.value,
            "two_J1_minus_value": 2.0 * J1 - med.value,
        }
        return payload, lg, grid, {"path": args.path}
    raise ConfigParseError(f"unknown dual subcommand {sub!r}")


def _cmd_bsde(args):
    model, grid, extra = _load_config(args)
    model = _require_finite(model)
    f = _terminal_vector(args, model, extra)
    spec = bsde.RegressionSpec(degree=args.degree, ridge=args.ridge)
    policy = _policy_from_args(args, grid, model.m)
    run = {
        "terminal": f,
        "degree": args.degree,
        "ridge": args.ridge,
        "policy": args.policy,
        "delta": args.delta,
    }
    sub = args.bsde_kind
    if sub == "solve":
        ensemble = simulate_ensemble(model, grid, args.paths, args.seed)
        traj = bsde.lsmc_backward_solve(model, f, policy, ensemble, spec)
        Y0, V0, U0 = traj.fits.initial_solution()
        payload = {
            "Y0": Y0,
            "V0": V0,
            "U0": U0,
            "var0": bsde.initial_variance_from_fits(traj.fits),
        }
        if args.out and args.out.endswith(".csv"):
            _dump_bsde_csv(args.out, grid, traj, model, cap=min(100, args.paths))
            payload["csv"] = args.out
            args.out = None
        return payload, model, grid, run
    if sub == "gap":
        report = bsde.duality_gap_report(
            model, f, policy, grid, args.paths, args.seed, spec
        )
        return report.as_dict(), model, grid, run
    if sub == "martingale":
        report = bsde.martingale_drift_check(
            model, f, policy, grid, args.paths, args.seed, spec
        )
        payload = {
            "per_step_mean": report.per_step_mean,
            "per_step_stderr": report.per_step_stderr,
            "total_mean": report.total_mean,
            "total_stderr": report.total_stderr,
        }
        return payload, model, grid, run
    if sub == "prop1":
        report = bsde.prop1_trajectory_check(
            model, f, grid, args.paths, args.seed, spec
        )
        return {"rms": report.rms, "max_rms": report.max_rms}, model, grid, run
    raise ConfigParseError(f"unknown bsde subcommand {sub!r}")


def _dump_bsde_csv(path, grid, traj, model, cap):
    d, m = model.d, model.m
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["t", "path_id"]
        header += [f"Y_{i + 1}" for i in range(d)]
        header += [f"V_{i + 1}{l + 1}" for i in range(d) for l in range(m)]
        header += [f"U_{l + 1}" for l in range(m)]
        w.writerow(header)
        for i in range(cap):
            for k in range(grid.steps):
                w.writerow(
                    [grid.times[k], i]
                    + list(traj.Y[i, k])
                    + list(traj.V[i, k].ravel())
                    + list(traj.U[i, k])
                )


# ---------------------------------------------------------------------------
# Parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualfilt",
        description="Filtering / dual-control experiment runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=False)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--paths", type=int, default=1000)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--threads", type=int, default=1)

    p_model = sub.add_parser("model")
    ms = p_model.add_subparsers(dest="model_kind", required=True)
    common(ms.add_parser("validate"))

    common(sub.add_parser("simulate"))

    p_filter = sub.add_parser("filter")
    fs = p_filter.add_subparsers(dest="filter_kind", required=True)
    for name in ("wonham", "kalman"):
        p = fs.add_parser(name)
        common(p)
        p.add_argument("--path", default=None, help="observation CSV")

    p_dual = sub.add_parser("dual")
    ds = p_dual.add_subparsers(dest="dual_kind", required=True)
    for name in ("det-check", "det-opt", "lq", "mee", "mn-compare"):
        p = ds.add_parser(name)
        common(p)
        p.add_argument("--terminal", "--f", dest="terminal", default=None)
        p.add_argument("--control", default=None)
        p.add_argument("--path", default=None, help="observation CSV")

    p_bsde = sub.add_parser("bsde")
    bs = p_bsde.add_subparsers(dest="bsde_kind", required=True)
    for name in ("solve", "gap", "martingale", "prop1"):
        p = bs.add_parser(name)
        common(p)
        p.add_argument("--terminal", "--f", dest="terminal", default=None)
        p.add_argument("--degree", type=int, default=2)
        p.add_argument("--ridge", type=float, default=1e-8)
        p.add_argument(
            "--policy",
            choices=("optimal", "open_loop", "perturbed"),
            default="optimal",
        )
        p.add_argument("--control", default=None)
        p.add_argument("--delta", type=float, default=0.0)

    return parser


_DISPATCH = {
    "model": _cmd_model_validate,
    "simulate": _cmd_simulate,
    "filter": _cmd_filter,
    "dual": _cmd_dual,
    "bsde": _cmd_bsde,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.monotonic()
    stamp = datetime.now(timezone.utc).isoformat()
    try:
        payload, model, grid, run = _DISPATCH[args.command](args)
        config = _resolved_config(args, model, grid, **run)
        _emit(args, payload, config, started, stamp)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
