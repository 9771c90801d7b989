"""Benchmark the compiled Wonham ensemble kernel against the numpy fallback.

Runs the same filtering workload under both backends (the fallback is
forced in a subprocess via DUALFILT_PURE_PYTHON=1) and reports wall-clock
times, throughput, and the max elementwise deviation between the two.

Usage: python3 benchmarks/bench_wonham.py [--paths N] [--steps K] [--repeat R]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

_WORKER = """
import json, os, sys, time
import numpy as np
from dualfilt import FiniteModel, TimeGrid, kernels, validate_model
from dualfilt.ensemble import simulate_batch
from dualfilt.filters import wonham_trajectory_ensemble

paths, steps, repeat = (int(x) for x in sys.argv[1:4])
model = validate_model(FiniteModel(
    rate_matrix=np.array([[-1.0, 1.0], [1.0, -1.0]]),
    obs_matrix=np.array([[0.0], [1.0]]),
    prior=np.array([0.5, 0.5]),
))
grid = TimeGrid(1.0, steps)
_, dZ = simulate_batch(model, grid, 0, 0, paths)
wonham_trajectory_ensemble(model, dZ[:100], grid.dt)  # warm up
times = []
for _ in range(repeat):
    t0 = time.perf_counter()
    pi, _ = wonham_trajectory_ensemble(model, dZ, grid.dt)
    times.append(time.perf_counter() - t0)
print(json.dumps({
    "backend": kernels.BACKEND,
    "best_seconds": min(times),
    "checksum": float(pi.sum()),
    "terminal_mean": pi[:, -1, :].mean(axis=0).tolist(),
}))
"""


def run(paths, steps, repeat, pure_python):
    env = dict(os.environ)
    if pure_python:
        env["DUALFILT_PURE_PYTHON"] = "1"
    else:
        env.pop("DUALFILT_PURE_PYTHON", None)
    out = subprocess.run(
        [sys.executable, "-c", _WORKER, str(paths), str(steps), str(repeat)],
        capture_output=True, text=True, env=env, check=True,
    )
    return json.loads(out.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=20_000)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    fast = run(args.paths, args.steps, args.repeat, pure_python=False)
    slow = run(args.paths, args.steps, args.repeat, pure_python=True)

    cells = args.paths * args.steps
    print(f"workload: {args.paths} paths x {args.steps} steps "
          f"(best of {args.repeat})")
    for r in (fast, slow):
        rate = cells / r["best_seconds"] / 1e6
        print(f"  {r['backend']:>7}: {r['best_seconds']:8.3f} s   "
              f"{rate:8.1f} M path-steps/s")
    dev = np.max(np.abs(
        np.array(fast["terminal_mean"]) - np.array(slow["terminal_mean"])
    ))
    if fast["backend"] == slow["backend"]:
        print("note: compiled kernel unavailable; both runs used the fallback")
    else:
        print(f"  speedup: {slow['best_seconds'] / fast['best_seconds']:.1f}x, "
              f"terminal-mean deviation {dev:.2e}")


if __name__ == "__main__":
    main()
