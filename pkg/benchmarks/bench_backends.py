"""Time the compiled and pure-Python batched IRLS kernels on the same workload.

Usage::

    python3 benchmarks/bench_backends.py [--n 400] [--p 2000] [--repeat 3]

Prints the best-of-``repeat`` wall time per backend and family, the speedup,
and the largest coefficient difference between the two kernels.
"""
import argparse
import time

import numpy as np

from multidr import _backend
from multidr.glm import fit_glm_many


def make_workload(n, p, q, family, seed):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, q - 1))])
    B = rng.normal(0, 0.3, (q, p))
    eta = X @ B
    if family == "logistic":
        Y = (rng.random((n, p)) < 1 / (1 + np.exp(-eta))).astype(float)
    else:
        Y = rng.poisson(np.exp(eta + 1.0)).astype(float)
    return X, Y


def best_time(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--p", type=int, default=2000)
    ap.add_argument("--q", type=int, default=6)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = _backend.available()
    print(f"available kernels: {', '.join(backends)} (default {_backend.DEFAULT})")
    print(f"{'family':<12} {'backend':<9} {'seconds':>9} {'fits/s':>10}")
    for family in ("logistic", "poisson_log"):
        X, Y = make_workload(args.n, args.p, args.q, family, args.seed)
        results = {}
        for name in backends:
            sec, fit = best_time(lambda: fit_glm_many(X, Y, family, backend=name), args.repeat)
            results[name] = (sec, fit)
            print(f"{family:<12} {name:<9} {sec:9.3f} {args.p / sec:10.0f}")
        if "compiled" in results:
            (tc, fc), (tp, fp) = results["compiled"], results["python"]
            ok = fc.converged & fp.converged
            diff = np.max(np.abs(fc.coefficients[ok] - fp.coefficients[ok])) if ok.any() else 0.0
            print(f"{family:<12} speedup {tp / tc:.2f}x, max |coef diff| {diff:.2e}")


if __name__ == "__main__":
    main()
