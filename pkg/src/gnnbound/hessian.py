"""Loss-Hessian traces per layer, Hessian-vector products, Taylor checks."""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .model import (flatten, group_slices, loss_and_flat_grad, num_params, objective_value,
                    unflatten)

log = logging.getLogger(__name__)

HVP_STEP = 1e-4
DIAG_STEP = 1e-3
EXACT_CAP = 2000


@dataclass(frozen=True)
class HessianTraceEstimate:
    layer: int
    value: float
    method: str  # "exact" or "hutchinson"
    probes: int = 0
    stderr: float = 0.0


# -- generic finite-difference machinery -------------------------------------

def hvp_fn(grad_fn, theta, v, h0=HVP_STEP):
    """Symmetric-difference Hessian-vector product of a gradient oracle."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(v)
    h = h0 / max(1.0, norm)
    return (grad_fn(theta + h * v) - grad_fn(theta - h * v)) / (2.0 * h)


def diag_second_differences(fn, theta, coords, h=DIAG_STEP):
    """``sum_p (f(t + h_p e_p) - 2 f(t) + f(t - h_p e_p)) / h_p^2`` with ``h_p = h (1 + |t_p|)``."""
    f0 = fn(theta)
    total = 0.0
    work = theta.copy()
    for p in coords:
        hp = h * (1.0 + abs(theta[p]))
        work[p] = theta[p] + hp
        fp = fn(work)
        work[p] = theta[p] - hp
        fm = fn(work)
        work[p] = theta[p]
        total += (fp - 2.0 * f0 + fm) / (hp * hp)
    return total


def hutchinson_fn(grad_fn, theta, coords, probes, rng_for_probe, h0=HVP_STEP):
    """Rademacher Hutchinson estimate of the trace of the ``coords`` block.

    Returns ``(mean, stderr)``; ``rng_for_probe(j)`` supplies the generator
    of probe ``j`` so results do not depend on evaluation order.
    """
    if probes < 1:
        raise ValueError("need at least one probe")
    coords = np.asarray(coords)
    samples = np.empty(probes)
    z = np.zeros_like(theta)
    for j in range(probes):
        r = rng_for_probe(j).integers(0, 2, size=coords.size) * 2.0 - 1.0
        z[:] = 0.0
        z[coords] = r
        samples[j] = np.dot(r, hvp_fn(grad_fn, theta, z, h0)[coords])
    stderr = float(samples.std(ddof=1) / np.sqrt(probes)) if probes > 1 else 0.0
    return float(samples.mean()), stderr


# -- model wrappers ------------------------------------------------------------

def _objective(model, example, kind, gin):
    def value(theta):
        return objective_value(unflatten(model, theta), example, kind, gin)

    def grad(theta):
        return loss_and_flat_grad(unflatten(model, theta), example, kind, gin)[1]

    return value, grad


def _layer_coords(model, layer):
    if layer is None:
        return np.arange(num_params(model))
    slices = group_slices(model)
    if layer not in slices:
        raise ValueError(f"layer {layer} has no parameters (valid: {sorted(slices)})")
    return slices[layer]


def hvp(model, example, v, kind="binary_logistic", gin=False, h0=HVP_STEP):
    """Hessian of the loss (flat parameter layout) applied to ``v``."""
    theta = flatten(model)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ValueError(f"direction has {v.size} entries, model has {theta.size} parameters")
    _, grad = _objective(model, example, kind, gin)
    return hvp_fn(grad, theta, v, h0)


def trace_exact(model, example, layer, kind="binary_logistic", gin=False,
                h=DIAG_STEP, cap=EXACT_CAP):
    """Trace of the layer-``layer`` Hessian block from diagonal second differences.

    Layer ``l`` (the readout) covers ``W_l`` (and GIN heads) only.
    """
    coords = _layer_coords(model, layer)
    if coords.size > cap:
        raise ValueError(
            f"layer {layer} has {coords.size} parameters (> cap {cap}); "
            "use trace_hutchinson instead"
        )
    value, _ = _objective(model, example, kind, gin)
    tr = diag_second_differences(value, flatten(model), coords, h)
    return HessianTraceEstimate(layer, float(tr), "exact")


def probe_rng(seed, example_index=0):
    def make(j):
        return np.random.default_rng((int(seed), int(example_index), int(j)))
    return make


def trace_hutchinson(model, example, layer, probes=100, seed=0, kind="binary_logistic",
                     gin=False, h0=HVP_STEP, example_index=0):
    coords = _layer_coords(model, layer)
    _, grad = _objective(model, example, kind, gin)
    mean, se = hutchinson_fn(grad, flatten(model), coords, probes,
                             probe_rng(seed, example_index), h0)
    return HessianTraceEstimate(layer, mean, "hutchinson", probes, se)


def layer_trace(model, example, layer, method="exact", probes=100, seed=0,
                kind="binary_logistic", gin=False, example_index=0):
    if method == "exact":
        return trace_exact(model, example, layer, kind, gin)
    if method == "hutchinson":
        return trace_hutchinson(model, example, layer, probes, seed, kind, gin,
                                example_index=example_index)
    raise ValueError(f"unknown trace method {method!r}")


class AlphaStats(NamedTuple):
    mean: float
    alpha: float  # max over examples, floored at 0
    traces: tuple


def dataset_alpha(model, dataset, layer, method="exact", probes=100, seed=0,
                  kind="binary_logistic", gin=False):
    """Mean and max (``alpha_i``) of per-example layer traces over ``dataset``."""
    if not dataset:
        raise ValueError("dataset is empty")
    traces = tuple(
        layer_trace(model, ex, layer, method, probes, seed, kind, gin, example_index=i).value
        for i, ex in enumerate(dataset)
    )
    top = max(traces)
    if top < 0.0:
        log.warning("layer %d: max trace %.3e < 0 clamped to 0", layer, top)
        top = 0.0
    return AlphaStats(float(np.mean(traces)), float(top), traces)


def full_hessian(model, example, kind="binary_logistic", gin=False, h0=HVP_STEP):
    """Dense symmetrised Hessian from ``P`` Hessian-vector products (small models only)."""
    theta = flatten(model)
    _, grad = _objective(model, example, kind, gin)
    eye = np.eye(theta.size)
    H = np.stack([hvp_fn(grad, theta, eye[p], h0) for p in range(theta.size)])
    return 0.5 * (H + H.T)


class TaylorResult(NamedTuple):
    lhs: float
    quad_term: float
    residual: float
    stderr: float


def taylor_residual(model, example, sigma, trials, seed=0, kind="binary_logistic",
                    antithetic=True, control_variate=True, traces=None, hessian=None):
    """Compare ``E[l(theta + E) - l(theta)]`` with ``(sigma^2/2) sum_i tr H_i``.

    ``E`` has i.i.d. ``N(0, sigma^2)`` entries on every parameter.  With
    ``antithetic`` each draw is paired with ``-E``.  With ``control_variate``
    the zero-mean term ``E^T H E / 2 - sigma^2 tr(H) / 2`` (and ``g^T E``
    when unpaired) is subtracted per sample, using a dense Hessian; the
    estimator stays unbiased for any Hessian approximation.
    """
    if sigma <= 0 or trials < 1:
        raise ValueError("need sigma > 0 and trials >= 1")
    theta = flatten(model)
    value, grad = _objective(model, example, kind, False)
    f0 = value(theta)
    if traces is None:
        traces = [trace_exact(model, example, g, kind).value
                  for g in sorted(group_slices(model))]
    quad = 0.5 * sigma ** 2 * float(np.sum(traces))
    g0 = grad(theta) if control_variate and not antithetic else None
    if control_variate and hessian is None:
        hessian = full_hessian(model, example, kind)
    tr_h = float(np.trace(hessian)) if control_variate else 0.0

    rng = np.random.default_rng(seed)
    samples = np.empty(trials)
    for j in range(trials):
        E = rng.standard_normal(theta.size) * sigma
        if antithetic:
            d = 0.5 * (value(theta + E) + value(theta - E)) - f0
        else:
            d = value(theta + E) - f0
        if control_variate:
            d -= 0.5 * E @ hessian @ E - 0.5 * sigma ** 2 * tr_h
            if g0 is not None:
                d -= g0 @ E
        samples[j] = d
    lhs = float(samples.mean())
    se = float(samples.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return TaylorResult(lhs, quad, abs(lhs - quad), se)


def top_eigenvalue(model, dataset, kind="binary_logistic", iters=50, seed=0):
    """Largest-magnitude eigenvalue of the mean loss Hessian (power iteration on HVPs)."""
    theta = flatten(model)
    grads = [_objective(model, ex, kind, False)[1] for ex in dataset]

    def mean_grad(t):
        return np.mean([g(t) for g in grads], axis=0)

    v = np.random.default_rng(seed).standard_normal(theta.size)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = hvp_fn(mean_grad, theta, v)
        lam = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    return lam


def layer_group(model, layer):
    """Parameter group holding layer ``layer`` (tied layers share group 1)."""
    if model.weight_tying and layer < model.layers:
        return 1
    return layer


def per_layer_alphas(model, dataset, method="exact", probes=100, seed=0,
                     kind="binary_logistic", gin=False):
    """One :class:`AlphaStats` per layer ``1..l``.

    Tied layers share one parameter block, so they all report the trace of
    that block.
    """
    cache = {}
    out = []
    for layer in range(1, model.layers + 1):
        g = layer_group(model, layer)
        if g not in cache:
            cache[g] = dataset_alpha(model, dataset, g, method, probes, seed, kind, gin)
        out.append(cache[g])
    return out
