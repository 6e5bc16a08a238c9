#!/usr/bin/env python3
"""Timing comparison of the compiled kernels against the numpy reference.

Runs the mini-batch SGD epoch and the single-batch loss/gradient for both
model families at the desk-scale shapes the simulator uses, plus a larger
shape for headroom. Usage: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from fedasmu._kernels import reference

try:
    from fedasmu._kernels import _fastkern as compiled
except ImportError:
    compiled = None


def time_call(fn, *args, repeat=200):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def cases():
    rng = np.random.default_rng(0)
    for name, n, s, c, h, batch in (
        ("desk shard", 200, 20, 10, 16, 32),
        ("large shard", 2000, 50, 10, 32, 64),
    ):
        X = rng.normal(size=(n, s))
        y = rng.integers(0, c, size=n).astype(np.int64)
        order = rng.permutation(n).astype(np.int64)
        w_lin = rng.normal(size=c * s + c)
        w_mlp = rng.normal(size=h * s + h + c * h + c)
        yield (f"{name} linear epoch",
               lambda m: m.linear_sgd_epoch(w_lin, X, y, c, 0.05, order, batch))
        yield (f"{name} mlp epoch",
               lambda m: m.mlp_sgd_epoch(w_mlp, X, y, c, h, 0.05, order, batch))
        Xb, yb = X[:batch], y[:batch]
        yield (f"{name} linear loss+grad",
               lambda m: m.linear_loss_grad(w_lin, Xb, yb, c))
        yield (f"{name} mlp loss+grad",
               lambda m: m.mlp_loss_grad(w_mlp, Xb, yb, c, h))


def main():
    if compiled is None:
        print("compiled backend unavailable; build with pip install -e .")
        return
    print(f"{'case':<28} {'python':>12} {'compiled':>12} {'speedup':>9}")
    for name, call in cases():
        t_py = time_call(lambda: call(reference))
        t_c = time_call(lambda: call(compiled))
        print(f"{name:<28} {t_py * 1e6:>10.1f}us {t_c * 1e6:>10.1f}us "
              f"{t_py / t_c:>8.2f}x")


if __name__ == "__main__":
    main()
