"""Worst-case instance whose generalization gap scales as ``alpha / sqrt(N)``.

The graph is complete with self-loops (``P`` is all-ones), every node carries
the feature ``u_1`` (top left singular vector of ``Z = W_1 ... W_l``), all
activations are linear and ``U = 0``.  The readout then equals
``alpha v_1^T`` with ``alpha = n^(l-1) sigma_max(Z)``, and a uniform +-1 label
makes the loss a two-point variable.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .graph import DiffusionKind, generate
from .io import csv_text
from .linalg import as_matrix, top_singular_triplet
from .model import DatasetExample, MpnnModel, forward

MIN_TRIALS = 30
GAP_COLUMNS = ("trial", "N", "alpha", "gap")


@dataclass(frozen=True)
class LowerBoundInstance:
    n: int
    l: int
    Z: np.ndarray
    u1: np.ndarray
    v1: np.ndarray
    lam: float
    alpha: float

    @property
    def v11(self):
        return float(self.v1[0])

    @property
    def v12(self):
        return float(self.v1[1])

    @property
    def L_plus(self):
        return _softplus(-self.alpha * self.v11)

    @property
    def L_minus(self):
        return _softplus(self.alpha * self.v12)


def _softplus(x):
    return float(np.logaddexp(0.0, x))


def linear_model(weights):
    """GCN-style model with identity activations and no skip term."""
    return MpnnModel(tuple(weights), None, None, ("identity",) * 3,
                     DiffusionKind.ADJACENCY_SELF_LOOPS)


def build_instance(weights, n, check=True):
    """Assemble the instance for ``weights = (W_1, ..., W_l)`` on ``n`` nodes."""
    weights = [as_matrix(w, f"W_{t}") for t, w in enumerate(weights, start=1)]
    if len(weights) < 2:
        raise ValueError("need l >= 2 weight matrices")
    if weights[-1].shape[1] != 2:
        raise ValueError(f"output dimension must be 2, got {weights[-1].shape[1]}")
    if n < 1:
        raise ValueError("n must be >= 1")
    Z = weights[0]
    for t, w in enumerate(weights[1:], start=2):
        if Z.shape[1] != w.shape[0]:
            raise ValueError(f"W_{t} has {w.shape[0]} rows, expected {Z.shape[1]}")
        Z = Z @ w
    l = len(weights)
    trip = top_singular_triplet(Z)
    alpha = float(n) ** (l - 1) * trip.sigma
    inst = LowerBoundInstance(n, l, Z, trip.u, trip.v, trip.sigma, alpha)
    if check:
        out = forward(linear_model(weights), instance_example(inst))[0]
        want = alpha * trip.v
        scale = max(1.0, float(np.linalg.norm(want)))
        if np.linalg.norm(out - want) > 1e-8 * scale:
            raise ArithmeticError(
                f"forward output {out} differs from alpha*v1 = {want}"
            )
    return inst


def instance_example(inst, label=0):
    X = np.outer(np.ones(inst.n), inst.u1)
    return DatasetExample(X, generate("complete", {"n": inst.n}), label)


def analytic_gap_std(inst, N):
    """Exact std of the empirical-minus-expected loss for ``N`` samples."""
    if N < 1:
        raise ValueError("N must be >= 1")
    return abs(inst.L_plus - inst.L_minus) / (2.0 * math.sqrt(N))


def simulate_gap(inst, N, trials, seed):
    """Monte-Carlo gaps ``mean_i b_i - (L+ + L-)/2`` over ``trials`` label draws.

    Returns ``(gaps, sample_std)``.
    """
    if trials < MIN_TRIALS:
        raise ValueError(f"need trials >= {MIN_TRIALS}, got {trials}")
    if N < 1:
        raise ValueError("N must be >= 1")
    pos = _kernels.count_positive_labels(int(seed), int(trials), int(N)).astype(np.float64)
    gaps = (pos / N - 0.5) * (inst.L_plus - inst.L_minus)
    return gaps, float(np.std(gaps, ddof=1))


def gaps_csv(inst, N, gaps):
    rows = [{"trial": t, "N": N, "alpha": inst.alpha, "gap": float(g)}
            for t, g in enumerate(gaps)]
    return csv_text(GAP_COLUMNS, rows, schema="lowerbound_gaps")
