"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat R]
Prints one line per kernel and problem size with both timings, the speedup,
and the largest absolute difference between the two results.
"""

import argparse
import timeit

import numpy as np

from bflsim._kernels import _pykernels

try:
    from bflsim._kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _rates_case(N, M, G, rng):
    gains = rng.uniform(1e-10, 1e-7, (N, M, G))
    off = rng.random(N) < 0.7
    es = rng.integers(0, M, N)
    sub = rng.integers(0, G, N)
    p = rng.uniform(0.01, 1.0, N)
    b = rng.uniform(1e6, 2e7, N)
    return (gains, off, es, sub, p, b, 1e-13)


def _ratio_case(n, d, rng):
    return (rng.standard_normal((n, d)), rng.standard_normal((n, d)))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    cases = [("offload_rates", f"N={N}", _rates_case(N, 4, 8, rng)) for N in (8, 64, 256)]
    cases += [("pairwise_max_ratio", f"n={n},d=50", _ratio_case(n, 50, rng)) for n in (20, 100, 300)]
    print(f"{'kernel':<20} {'size':<12} {'python_ms':>10} {'cython_ms':>10} {'speedup':>8} {'max_diff':>10}")
    for name, size, a in cases:
        py = getattr(_pykernels, name)
        t_py = min(timeit.repeat(lambda: py(*a), number=10, repeat=args.repeat)) / 10
        if _ckernels is None:
            print(f"{name:<20} {size:<12} {t_py * 1e3:>10.3f} {'n/a':>10}")
            continue
        cy = getattr(_ckernels, name)
        t_cy = min(timeit.repeat(lambda: cy(*a), number=10, repeat=args.repeat)) / 10
        diff = float(np.max(np.abs(np.asarray(py(*a)) - np.asarray(cy(*a)))))
        print(f"{name:<20} {size:<12} {t_py * 1e3:>10.3f} {t_cy * 1e3:>10.3f} "
              f"{t_py / t_cy:>8.1f} {diff:>10.2e}")


if __name__ == "__main__":
    main()
