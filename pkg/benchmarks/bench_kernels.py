#!/usr/bin/env python3
"""Benchmark the compiled kernel against the NumPy fallback.

Usage: python3 benchmarks/bench_kernels.py [--particles 4096] [--steps 504]
"""

import argparse
import time

import numpy as np

from dosewise import _kernels
from dosewise.config import default_config


def run(impl, x, xi, th, params, steps, with_sens):
    rng = np.random.default_rng(0)
    d = np.zeros_like(x)
    t0 = time.perf_counter()
    if with_sens:
        for _ in range(steps):
            x, xi = _kernels.step_sens_batch(x, xi, 50.0, d, th, params, impl=impl)
    else:
        for _ in range(steps):
            x = _kernels.step_batch(x, 50.0, d, th, params, impl=impl)
    return time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--particles", type=int, default=4096)
    ap.add_argument("--steps", type=int, default=504)
    args = ap.parse_args()

    cfg = default_config()
    model = cfg.model()
    params = _kernels.pack_params(model)
    k = args.particles
    x0 = np.asarray(cfg.x0())
    x = np.tile(x0, (k, 1)) * np.random.default_rng(1).uniform(0.9, 1.1, (k, 8))
    xi = np.zeros((k, 8, 8))
    th = np.tile(cfg.theta0(), (k, 1))

    backs = _kernels.backends()
    print(f"particles={k} steps={args.steps} available={sorted(backs)}")
    for with_sens in (False, True):
        label = "state+sensitivity" if with_sens else "state only"
        times = {}
        for name, impl in sorted(backs.items()):
            dt = run(impl, x.copy(), xi.copy(), th, params, args.steps, with_sens)
            rate = k * args.steps / dt / 1e6
            times[name] = dt
            print(f"  {label:18s} {name:7s} {dt * 1e3:9.1f} ms   {rate:7.2f} M particle-steps/s")
        if len(times) == 2:
            print(f"  {label:18s} speedup cython/numpy: {times['numpy'] / times['cython']:.2f}x")


if __name__ == "__main__":
    main()
