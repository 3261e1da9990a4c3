"""Compiled vs pure-Python Strang kernel: time per step and agreement.

Usage: python benchmarks/bench_kernel.py [--steps N] [--repeat R]
"""
import argparse
import time

import numpy as np

from joscillator import kernel
from joscillator.dissipator import RelaxationParams
from joscillator.feedback import GeometrySample
from joscillator.model import Species, build_model
from joscillator.spins import alpha_beta_from_integrals, build_a3x_system, build_two_spin_system


def _models():
    geo = GeometrySample(4.2e-3, 12.45e-3, 967.0)
    yield "a3x (16-dim)", build_model(Species(build_a3x_system(1.687), geo, RelaxationParams(32.0),
                                              alpha_beta_from_integrals(66e-12, 124e-12, geo)))
    geo2 = GeometrySample(4.2e-3, 12.45e-3, 100.0)
    yield "two-spin (4-dim)", build_model(Species(build_two_spin_system(15.0), geo2, RelaxationParams(2.5),
                                                  alpha_beta_from_integrals(50e-12, 0.0, geo2)))


def bench(model, backend, steps, repeat, field):
    best = np.inf
    for _ in range(repeat):
        rho = model.to_kernel(model.rho_eq)
        t0 = time.perf_counter()
        out, _ = kernel.advance(model.ops, rho, field, field, 5e-4, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best / steps, out, rho


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    field = 2e-10 * np.sin(2 * np.pi * 3.374 * np.arange(args.steps) * 5e-4)
    print(f"backends available: {sorted(kernel.BACKENDS)}  (default {kernel.BACKEND})")
    print(f"{'system':18s} {'backend':8s} {'us/step':>9s} {'speedup':>8s} {'max |d rho|':>12s}")
    for label, model in _models():
        ref = None
        for backend in ("python", "cython"):
            if backend not in kernel.BACKENDS:
                print(f"{label:18s} {backend:8s} {'n/a':>9s}")
                continue
            steps = args.steps if backend == "cython" else max(1, args.steps // 10)
            t, out, rho = bench(model, backend, steps, args.repeat, field[:steps])
            if ref is None:
                ref = (t, steps, rho)
                print(f"{label:18s} {backend:8s} {t * 1e6:9.2f} {1.0:8.1f} {'-':>12s}")
            else:
                # agreement over the python run length
                r2 = model.to_kernel(model.rho_eq)
                kernel.advance(model.ops, r2, field[:ref[1]], field[:ref[1]], 5e-4, backend=backend)
                diff = np.abs(r2 - ref[2]).max()
                print(f"{label:18s} {backend:8s} {t * 1e6:9.2f} {ref[0] / t:8.1f} {diff:12.2e}")


if __name__ == "__main__":
    main()
