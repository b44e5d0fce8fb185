"""Time the hot kernels under the numba and pure-numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Batch kernels are timed on both implementations inside one process. The
scalar simulator kernels are timed compiled and through ``py_func`` (what
``RLPIPE_BACKEND=numpy`` runs). Results also check that both paths agree.
"""
import argparse
import timeit

import numpy as np

from rlpipe import kernels, sysid
from rlpipe._accel import HAS_NUMBA


def _py(f):
    return getattr(f, "py_func", f)


def bench(label, fn, repeat, number):
    fn()  # warm-up (triggers compilation)
    best = min(timeit.repeat(fn, repeat=repeat, number=number)) / number
    return label, best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=512)
    args = ap.parse_args()
    if not HAS_NUMBA:
        raise SystemExit("numba backend inactive (RLPIPE_BACKEND=numpy?); nothing to compare")

    rng = np.random.default_rng(0)
    n = args.batch
    acts = rng.uniform(-1, 1, size=(n, 3))
    ach = rng.uniform(-2, 2, size=(n, 3))
    goals = ach + rng.normal(0, 0.3, size=(n, 3))
    prev = rng.uniform(-1, 1, size=(n, 3))
    r_diag, s_diag = np.array([0.0, 0.8, 0.8]), np.array([0.2, 0.2, 0.2])
    coeffs = sysid.default_truth_model().coeffs
    exps = kernels.MONOMIALS

    def episode(advance):
        x = y = th = 0.0
        for k in range(300):
            x, y, th = advance(x, y, th, 0.5, 0.1, -0.2, coeffs, exps, 1 / 30, 3)
        return x

    def surrogate_episode(advance):
        fifo, active, vel = np.zeros((3, 3)), np.zeros(3), np.zeros(3)
        x = y = th = 0.0
        head, age = 0, 3
        for k in range(300):
            x, y, th, head, age = advance(x, y, th, 0.5, 0.1, -0.2, coeffs, exps, 1 / 30, 3,
                                          fifo, head, active, age, vel, 0.15, 3)
        return x

    cases = [
        ("features_batch", lambda: kernels._features_batch_loop(acts, exps),
         lambda: kernels._features_batch_numpy(acts, exps), 200),
        ("relabel_batch", lambda: kernels._relabel_batch_loop(ach, goals, acts, prev, 0.3, 0.3, r_diag, s_diag),
         lambda: kernels._relabel_batch_numpy(ach, goals, acts, prev, 0.3, 0.3, r_diag, s_diag), 200),
        ("core episode (300 steps)", lambda: episode(kernels.core_advance),
         lambda: episode(_py(kernels.core_advance)), 5),
        ("surrogate episode (300 steps)", lambda: surrogate_episode(kernels.surrogate_advance),
         lambda: surrogate_episode(_py(kernels.surrogate_advance)), 5),
    ]
    print(f"{'kernel':32s} {'numba':>12s} {'numpy':>12s} {'speed-up':>9s}")
    for name, fast, slow, number in cases:
        a, b = fast(), slow()
        same = all(np.array_equal(u, v) for u, v in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        _, t_fast = bench(name, fast, args.repeat, number)
        _, t_slow = bench(name, slow, args.repeat, number)
        flag = "" if same else "  MISMATCH"
        print(f"{name:32s} {t_fast * 1e6:10.1f}us {t_slow * 1e6:10.1f}us {t_slow / t_fast:8.1f}x{flag}")


if __name__ == "__main__":
    main()
