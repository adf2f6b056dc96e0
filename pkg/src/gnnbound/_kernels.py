"""Hot inner loops.

Each kernel is plain numpy code that numba can compile; see ``_accel``.
"""

import numpy as np

from ._accel import NUMBA_ENABLED, njit

# status codes returned by the power iteration kernel
CONVERGED = 0
ZERO_IMAGE = 1
MAX_ITER = 2


@njit
def sym_power_iteration(S, v0, tol, max_iter, need_vector):
    """Top eigenpair of a symmetric PSD matrix ``S`` by power iteration.

    Converged when either the residual bound ``||S v - lam v|| <= tol * lam``
    holds, or the geometric tail of the (monotone) Rayleigh quotients,
    extrapolated from the last two increments, is below ``tol * lam / 10``.
    With ``need_vector`` only the residual test counts, so the returned
    vector is converged as well.
    Returns ``(lam, v, iterations, relative_residual, status)``.
    """
    v = v0 / np.sqrt(np.dot(v0, v0))
    lam = 0.0
    prev_lam = 0.0
    prev_delta = 0.0
    rel = np.inf
    for it in range(1, max_iter + 1):
        w = np.dot(S, v)
        norm_w = np.sqrt(np.dot(w, w))
        if norm_w == 0.0:
            return 0.0, v, it, 0.0, ZERO_IMAGE
        lam = np.dot(v, w)
        r = w - lam * v
        rel = np.sqrt(np.dot(r, r)) / norm_w
        v = w / norm_w
        if rel <= tol:
            return lam, v, it, rel, CONVERGED
        delta = lam - prev_lam
        if not need_vector and it > 2 and 0.0 <= delta < prev_delta:
            ratio = delta / prev_delta
            if delta * ratio / (1.0 - ratio) <= 0.1 * tol * lam:
                return lam, v, it, rel, CONVERGED
        prev_delta = delta
        prev_lam = lam
    return lam, v, max_iter, rel, MAX_ITER


@njit
def _splitmix64(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    z = x
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit
def count_positive_labels(seed, trials, n_samples):
    """Number of +1 labels per trial for fair coin flips.

    Flip ``i`` of trial ``t`` is the low bit of ``splitmix64(key + t*N + i)``,
    so every trial is reproducible on its own regardless of run order.
    """
    key = _splitmix64(np.uint64(seed))
    counts = np.zeros(trials, dtype=np.int64)
    n = np.uint64(n_samples)
    for t in range(trials):
        base = key + np.uint64(t) * n
        c = 0
        for i in range(n_samples):
            c += np.int64(_splitmix64(base + np.uint64(i)) & np.uint64(1))
        counts[t] = c
    return counts


def count_positive_labels_numpy(seed, trials, n_samples, chunk=1 << 20):
    """Vectorised numpy twin of :func:`count_positive_labels`."""
    with np.errstate(over="ignore"):
        key = _splitmix64_np(np.array([seed], dtype=np.uint64))[0]
        counts = np.zeros(trials, dtype=np.int64)
        rows = max(1, chunk // max(1, n_samples))
        offs = np.arange(n_samples, dtype=np.uint64)
        for start in range(0, trials, rows):
            t = np.arange(start, min(trials, start + rows), dtype=np.uint64)
            idx = key + t[:, None] * np.uint64(n_samples) + offs[None, :]
            bits = _splitmix64_np(idx) & np.uint64(1)
            counts[start:start + len(t)] = bits.sum(axis=1)
    return counts


def _splitmix64_np(x):
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


if not NUMBA_ENABLED:
    # the scalar loop is far too slow interpreted; use the vectorised twin
    count_positive_labels = count_positive_labels_numpy
