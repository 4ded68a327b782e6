"""Benchmark the jitted hot kernels against their pure-numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--sizes 1000,10000,100000]

The same comparison can be forced package-wide by setting DSG_NUMBA=0 in the
environment before import.
"""

import argparse
import time

import numpy as np

from dsg import _kernels as K


def time_fn(fn, *args, repeat=7):
    fn(*args)  # warm-up / JIT compile
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_categorical(m, k, rng):
    probs = rng.random((m, k))
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(m)
    t_np = time_fn(K.categorical_rows_np, probs, u)
    t_nb = time_fn(K._categorical_rows_nb, probs, u) if K.USE_NUMBA else float("nan")
    return t_np, t_nb


def bench_posterior(m, k, rng):
    q = rng.random((k, k)) + 0.1
    q /= q.sum(axis=1, keepdims=True)
    qb = rng.random((k, k)) + 0.1
    qb /= qb.sum(axis=1, keepdims=True)
    qt = qb @ q
    pred = rng.random((m, k))
    pred /= pred.sum(axis=1, keepdims=True)
    z = rng.integers(0, k, size=m)
    t_np = time_fn(K.posterior_rows_np, pred, z, q, qb, qt)
    t_nb = time_fn(K._posterior_rows_nb, pred, z, q, qb, qt) if K.USE_NUMBA else float("nan")
    return t_np, t_nb


def bench_encode(m, rng):
    radices = np.array([3, 4, 4, 4, 4], dtype=np.int64)
    digits = np.stack([rng.integers(0, r, size=m) for r in radices], axis=1)
    digits = np.ascontiguousarray(digits)
    t_np = time_fn(K.encode_mixed_radix_np, digits, radices)
    t_nb = time_fn(K._encode_mixed_radix_nb, digits, radices) if K.USE_NUMBA else float("nan")
    return t_np, t_nb


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--sizes", default="1000,10000,100000")
    parser.add_argument("--k", type=int, default=10)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]
    rng = np.random.default_rng(0)

    if not K.USE_NUMBA:
        print("numba path disabled (DSG_NUMBA=0 or import failure); showing numpy only")
    header = f"{'kernel':<18}{'rows':>9}{'numpy':>12}{'numba':>12}{'speedup':>9}"
    print(header)
    print("-" * len(header))
    for m in sizes:
        for name, fn in (("categorical_rows", bench_categorical),
                         ("posterior_rows", bench_posterior)):
            t_np, t_nb = fn(m, args.k, rng)
            ratio = t_np / t_nb if t_nb == t_nb else float("nan")
            print(f"{name:<18}{m:>9}{t_np * 1e3:>10.2f}ms{t_nb * 1e3:>10.2f}ms{ratio:>8.1f}x")
        t_np, t_nb = bench_encode(m, rng)
        ratio = t_np / t_nb if t_nb == t_nb else float("nan")
        print(f"{'encode_mixed_radix':<18}{m:>9}{t_np * 1e3:>10.2f}ms{t_nb * 1e3:>10.2f}ms{ratio:>8.1f}x")


if __name__ == "__main__":
    main()
