"""Benchmark the two step-kernel lanes (compiled vs numpy) and verify they
produce bit-identical output.

Usage: python benchmarks/bench_step_kernel.py [--particles N] [--steps M]

The per-step benchmark times the fused kernel alone on a fixed workload;
the end-to-end benchmark runs a full population simulation through each
lane in a subprocess (lane selection happens at import time).
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from branchfield.engine import _kernel_np

try:
    from branchfield.engine import _kernel_cy
except ImportError:
    _kernel_cy = None

END_TO_END = r"""
import json, os, time
import numpy as np
from branchfield.engine import active_lane, simulate_population
from branchfield.engine.simulate import RecordOptions
from branchfield.flows import MeasureFlow
from branchfield.measures import FiniteMeasure
from branchfield.model import ClosedLoopControl, affine_model_1d
from branchfield.timegrid import TimeGrid

model = affine_model_1d(-0.3, 0.2, 0.5, sigma=0.4, gamma=0.8,
                        progeny_probs=[0.3, 0.2, 0.5], gamma_bar=1.0)
ctrl = ClosedLoopControl.affine(0.1, -0.2)
nu0 = FiniteMeasure([[0.0], [1.0]], [1.0, 1.0])
grid = TimeGrid.from_dt(0, 1.0, 1e-3)
flow = MeasureFlow.constant(nu0, grid.times)
start = time.time()
res = simulate_population(model, ctrl, flow, grid, 20000, 7, nu0)
elapsed = time.time() - start
steps = float(res.total_counts.sum()) * 1.0
print(json.dumps({"lane": active_lane(), "seconds": elapsed,
                  "particle_steps": steps,
                  "final_mass": res.total_counts[-1] / 20000}))
"""


def bench_step_kernel(n_particles: int, n_steps: int) -> None:
    rng = np.random.default_rng(0)
    x = rng.normal(size=n_particles)
    tree = np.sort(rng.integers(0, n_particles // 3,
                                size=n_particles)).astype(np.int64)
    cum = np.cumsum([0.3, 0.2, 0.5])
    args = (0.001, -0.2, 0.05, 0.0126, 0.001, 0.8, 1.0, cum, 123)

    lanes = {"numpy": _kernel_np.step_structured}
    if _kernel_cy is not None:
        lanes["cython"] = _kernel_cy.step_structured

    print(f"per-step kernel, {n_particles} particles x {n_steps} steps")
    timings = {}
    outputs = {}
    for name, kernel in lanes.items():
        start = time.time()
        for step in range(n_steps):
            out = kernel(x, tree, *args, step)
        elapsed = time.time() - start
        rate = n_particles * n_steps / elapsed
        timings[name] = elapsed
        outputs[name] = kernel(x, tree, *args, 42)
        print(f"  {name:7s}: {elapsed:7.3f}s  ({rate / 1e6:7.1f}M "
              f"particle-steps/s)")
    if len(outputs) == 2:
        same = all(np.array_equal(a, b)
                   for a, b in zip(outputs["numpy"], outputs["cython"]))
        print(f"  bit-identical output: {same}")
        if not same:
            raise SystemExit("lane outputs diverged")
        print(f"  speedup: {timings['numpy'] / timings['cython']:.2f}x")


def bench_end_to_end() -> None:
    print("end-to-end population run (20k trees, 1000 steps, branching LQ)")
    results = {}
    for disable in ("1", ""):
        env = dict(os.environ)
        if disable:
            env["BRANCHFIELD_DISABLE_EXTENSION"] = "1"
        else:
            env.pop("BRANCHFIELD_DISABLE_EXTENSION", None)
        proc = subprocess.run([sys.executable, "-c", END_TO_END], env=env,
                              capture_output=True, text=True, check=True)
        payload = json.loads(proc.stdout.strip().splitlines()[-1])
        results[payload["lane"]] = payload
        print(f"  {payload['lane']:7s}: {payload['seconds']:7.2f}s "
              f"({payload['particle_steps'] / payload['seconds'] / 1e6:6.1f}M "
              f"particle-steps/s), final mass {payload['final_mass']:.4f}")
    if len(results) == 2:
        masses = {round(p["final_mass"], 12) for p in results.values()}
        print(f"  identical results across lanes: {len(masses) == 1}")
        print(f"  speedup: "
              f"{results['numpy']['seconds'] / results['cython']['seconds']:.2f}x")


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--particles", type=int, default=50_000)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--skip-end-to-end", action="store_true")
    opts = parser.parse_args()
    bench_step_kernel(opts.particles, opts.steps)
    if not opts.skip_end_to_end:
        bench_end_to_end()
