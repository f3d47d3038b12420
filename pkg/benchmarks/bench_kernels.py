#!/usr/bin/env python3
"""Benchmark the compiled tree kernels against the pure-numpy fallback.

Times ``build_tree`` (variance and gini) and ``apply_tree`` under both
backends in one process via the ``force_numpy`` switch, checks that the two
implementations return bit-identical node arrays, and prints a table with
the speedup.  When numba is unavailable or disabled through
``CROPCATE_DISABLE_NUMBA=1`` only the numpy rows are reported.

Usage:

    python3 benchmarks/bench_kernels.py [--n 20000] [--p 8] [--repeat 3]
"""

import argparse
import time

import numpy as np

from cropcate import kernels as K

CRITERION_CODES = {"variance": 1, "gini": 2}


def _arrays_equal(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    if a.dtype.kind == "f" and b.dtype.kind == "f":
        return bool(np.array_equal(a, b, equal_nan=True))
    return bool(np.array_equal(a, b))


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=20000,
                        help="training rows (default 20000)")
    parser.add_argument("--p", type=int, default=8,
                        help="features (default 8)")
    parser.add_argument("--apply-n", type=int, default=200000,
                        help="rows scored in the apply benchmark")
    parser.add_argument("--max-depth", type=int, default=12)
    parser.add_argument("--min-leaf", type=int, default=5)
    parser.add_argument("--repeat", type=int, default=3,
                        help="repetitions; the best time is reported")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    X = rng.normal(size=(args.n, args.p))
    y_reg = X[:, 0] + np.sin(2.0 * X[:, 1]) + rng.normal(size=args.n)
    y_bin = (rng.random(args.n)
             < 1.0 / (1.0 + np.exp(-X[:, 0]))).astype(np.float64)
    X_apply = rng.normal(size=(args.apply_n, args.p))
    samples = np.arange(args.n, dtype=np.int64)

    def build(target, criterion, force_numpy):
        return K.build_tree(X, target, samples, CRITERION_CODES[criterion],
                            args.max_depth, args.min_leaf, args.p, args.seed,
                            force_numpy=force_numpy)

    print(f"active backend: {K.backend()}   "
          f"n={args.n} p={args.p} max_depth={args.max_depth} "
          f"min_leaf={args.min_leaf} repeat={args.repeat}")

    cases = [("build variance", lambda fnp: build(y_reg, "variance", fnp)),
             ("build gini", lambda fnp: build(y_bin, "gini", fnp))]
    tree = build(y_reg, "variance", force_numpy=True)
    cases.append(("apply 200k rows",
                  lambda fnp: K.apply_tree(tree[0], tree[1], tree[2],
                                           tree[3], X_apply,
                                           force_numpy=fnp)))

    if K.NUMBA_ENABLED:
        for _, fn in cases:
            fn(False)  # warm-up: trigger JIT compilation before timing

    header = f"{'kernel':<18} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, fn in cases:
        t_np = _time(lambda: fn(True), args.repeat)
        if K.NUMBA_ENABLED:
            t_nb = _time(lambda: fn(False), args.repeat)
            out_np, out_nb = fn(True), fn(False)
            if not isinstance(out_np, tuple):
                out_np, out_nb = (out_np,), (out_nb,)
            same = (len(out_np) == len(out_nb)
                    and all(_arrays_equal(a, b)
                            for a, b in zip(out_np, out_nb)))
            flag = "" if same else "  OUTPUTS DIFFER"
            print(f"{name:<18} {t_np * 1e3:>12.2f} {t_nb * 1e3:>12.2f} "
                  f"{t_np / t_nb:>8.1f}x{flag}")
        else:
            print(f"{name:<18} {t_np * 1e3:>12.2f} {'-':>12} {'-':>9}")


if __name__ == "__main__":
    main()
