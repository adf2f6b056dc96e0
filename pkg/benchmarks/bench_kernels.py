"""Time the compiled kernels against their pure-numpy paths.

Run with ``python benchmarks/bench_kernels.py``.  The numpy path is what runs
when ``GNNBOUND_NUMBA=0`` is set; both paths must agree, which is checked
before timing.
"""

import argparse
import time

import numpy as np

from gnnbound import _kernels
from gnnbound._accel import NUMBA_ENABLED


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_labels(trials, n_samples, repeat):
    fast = lambda: _kernels.count_positive_labels(7, trials, n_samples)
    slow = lambda: _kernels.count_positive_labels_numpy(7, trials, n_samples)
    assert np.array_equal(fast(), slow()), "label kernels disagree"
    return best_of(fast, repeat), best_of(slow, repeat)


def bench_power(dim, repeat):
    rng = np.random.default_rng(0)
    M = rng.standard_normal((dim, dim))
    S = M.T @ M
    v0 = np.ones(dim)
    args = (S, v0, 1e-10, 10_000, False)
    fast = lambda: _kernels.sym_power_iteration(*args)
    slow = lambda: _kernels.sym_power_iteration.py_func(*args)
    a, b = fast(), slow()
    assert abs(a[0] - b[0]) <= 1e-9 * abs(b[0]), "power iteration paths disagree"
    return best_of(fast, repeat), best_of(slow, repeat)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()
    if not NUMBA_ENABLED:
        print("numba disabled (GNNBOUND_NUMBA=0 or not installed): both columns run numpy")
    rows = [
        ("labels 2000x10000", *bench_labels(2000, 10_000, args.repeat)),
        ("labels 200x100000", *bench_labels(200, 100_000, args.repeat)),
        ("power_iter 16x16", *bench_power(16, args.repeat)),
        ("power_iter 128x128", *bench_power(128, args.repeat)),
    ]
    print(f"{'kernel':<22}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}")
    for name, fast, slow in rows:
        print(f"{name:<22}{fast:>12.4f}{slow:>12.4f}{slow / fast:>10.1f}")


if __name__ == "__main__":
    main()
