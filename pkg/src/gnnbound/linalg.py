"""Dense matrix helpers: validation, spectral norm, top singular triplet."""

from typing import NamedTuple

import numpy as np

from . import _kernels

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000
_PERTURB_SEED = 20230601


class ConvergenceError(RuntimeError):
    """Power iteration did not reach the requested tolerance."""

    def __init__(self, message, last_iterate, residual):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class SingularTriplet(NamedTuple):
    sigma: float
    u: np.ndarray
    v: np.ndarray
    degenerate: bool


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite, non-empty, C-ordered float64 2-d array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-d array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return m


def _gram(m):
    # the smaller of M^T M and M M^T; both share the nonzero spectrum
    if m.shape[1] <= m.shape[0]:
        return m.T @ m, True
    return m @ m.T, False


def _perturbation(dim):
    rng = np.random.default_rng(_PERTURB_SEED)
    z = rng.standard_normal(dim)
    return z / np.linalg.norm(z)


def _top_eigpair(S, tol, max_iter, need_vector=False):
    """Top eigenpair of symmetric PSD ``S`` from two deterministic starts.

    The all-ones start can be orthogonal to the top eigenspace for highly
    structured matrices; the seeded start guards against that.
    """
    dim = S.shape[0]
    ones = np.ones(dim) / np.sqrt(dim)
    alt = _perturbation(dim)
    starts = (ones, ones + 0.5 * alt)
    best = None
    for v0 in starts:
        lam, v, it, rel, status = _kernels.sym_power_iteration(S, v0, tol, max_iter, need_vector)
        if status == _kernels.ZERO_IMAGE:
            # start vector lies in the null space; retry from the seeded vector
            lam, v, it, rel, status = _kernels.sym_power_iteration(S, alt, tol, max_iter, need_vector)
            if status == _kernels.ZERO_IMAGE:
                continue
        if status == _kernels.MAX_ITER and best is not None and lam <= best[0] * (1 + tol):
            # the guard start crawls through a near-degenerate pair (odd cycles)
            # but never rose above the converged value: nothing larger was found
            continue
        if status == _kernels.MAX_ITER:
            raise ConvergenceError(
                f"power iteration did not converge in {max_iter} iterations "
                f"(relative residual {rel:.3e})",
                last_iterate=v,
                residual=rel,
            )
        if best is None or lam > best[0]:
            best = (lam, v)
    if best is None:
        return 0.0, ones
    return max(best[0], 0.0), best[1]


def spectral_norm(M, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Largest singular value of ``M`` via power iteration on its Gram matrix."""
    if not 0.0 < tol < 1.0:
        raise ValueError("tol must lie in (0, 1)")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    m = as_matrix(M)
    if not np.any(m):
        return 0.0
    S, _ = _gram(m)
    lam, _ = _top_eigpair(S, tol, max_iter)
    return float(np.sqrt(lam))


def top_singular_triplet(M, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """``(sigma, u, v, degenerate)`` with ``sigma * outer(u, v)`` the best rank-1 fit.

    Sign convention: the first nonzero entry of ``u`` is non-negative.
    ``degenerate`` is set when the top two singular values are closer than
    ``tol`` (relative), in which case ``u``/``v`` are one arbitrary but
    deterministic choice from the top singular subspace.
    """
    m = as_matrix(M)
    rows, cols = m.shape
    if not np.any(m):
        u = np.zeros(rows)
        u[0] = 1.0
        v = np.zeros(cols)
        v[0] = 1.0
        return SingularTriplet(0.0, u, v, min(rows, cols) > 1)

    S, right = _gram(m)
    slow = False
    try:
        lam, w = _top_eigpair(S, tol, max_iter, need_vector=True)
    except ConvergenceError:
        # a tiny spectral gap stalls the vector but not the eigenvalue
        lam, _ = _top_eigpair(S, tol, max_iter)
        w = _kernels.sym_power_iteration(S, np.ones(S.shape[0]), tol, max_iter, True)[1]
        slow = True
    sigma = float(np.sqrt(lam))
    if right:
        v = w / np.linalg.norm(w)
        u = m @ v / sigma
        u /= np.linalg.norm(u)
    else:
        u = w / np.linalg.norm(w)
        v = m.T @ u / sigma
        v /= np.linalg.norm(v)

    nz = np.flatnonzero(np.abs(u) > 1e-14)
    if nz.size and u[nz[0]] < 0:
        u, v = -u, -v

    degenerate = slow
    if not slow and min(rows, cols) > 1:
        deflated = S - lam * np.outer(w, w) / np.dot(w, w)
        deflated = 0.5 * (deflated + deflated.T)
        lam2, _ = _top_eigpair(deflated, max(tol, 1e-12), max_iter)
        sigma2 = float(np.sqrt(max(lam2, 0.0)))
        degenerate = (sigma - sigma2) <= tol * sigma
    return SingularTriplet(sigma, u, v, degenerate)


def stable_rank_ratio(M):
    """``||M||_F / ||M||_2``; 0 for the zero matrix."""
    m = as_matrix(M)
    fro = float(np.linalg.norm(m))
    if fro == 0.0:
        return 0.0
    return fro / spectral_norm(m)
