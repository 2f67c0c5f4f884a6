"""Time the compiled kernels against the pure-Python fallback.

Usage: ``python benchmarks/bench_kernels.py [--repeat N]``
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from hopcast import _pykernels, kernels
from hopcast.dynamics import ATOL, RTOL, system_spec


def _cases():
    rng = np.random.default_rng(0)
    lorenz = system_spec("Lorenz", model_derivatives=False)
    glyco = system_spec("Glycolytic")
    states = rng.uniform(-20, 20, (2000, 3))
    k, s = 2000, 1000
    w = rng.random((300, k))
    cum = np.cumsum(w / w.sum(axis=1, keepdims=True), axis=1)
    values = rng.standard_normal(k)
    uniforms = rng.random((300, s))
    probs = np.sort(rng.random(18))
    max_step = np.inf
    return {
        "eval_rhs_batch (Lorenz, 2000 states)": lambda b: b.eval_rhs_batch(
            1, lorenz.kernel_params, states),
        "integrate_grid (Lorenz, T=300)": lambda b: b.integrate_grid(
            1, lorenz.kernel_params, np.array([1.0, 1.0, 20.0]), lorenz.dt, 300, RTOL, ATOL,
            max_step, 10 ** 6),
        "integrate_grid (Glycolytic, T=400)": lambda b: b.integrate_grid(
            4, glyco.kernel_params, np.array([1.0, 1.0, 0.1, 0.2, 0.2, 1.0, 0.07]), glyco.dt,
            400, RTOL, ATOL, max_step, 10 ** 6),
        "sample_quantile_stats (300 x 1000 draws, K=2000)": lambda b: b.sample_quantile_stats(
            cum, values, uniforms, probs),
    }


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if kernels.compiled_backend is None:
        print("compiled extension not built; only the Python fallback is timed")
    print(f"{'kernel':52s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in _cases().items():
        py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat))
        if kernels.compiled_backend is None:
            print(f"{name:52s} {py * 1e3:10.2f} {'-':>10s} {'-':>8s}")
            continue
        cy = min(timeit.repeat(lambda: fn(kernels.compiled_backend), number=1,
                               repeat=args.repeat))
        print(f"{name:52s} {py * 1e3:10.2f} {cy * 1e3:10.2f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
