"""Generalization-bound calculators for message-passing GNNs.

Our bounds use the spectral norms ``s_i`` and stable-rank ratios ``r_i`` of the
layer weights together with dataset-level maxima of ``||X||`` and ``||P_G||``.
Two prior-work baselines (a PAC-Bayes margin bound and a Rademacher bound for
weight-tied MPNNs) are provided for comparison.
"""

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import DiffusionKind, diffusion_matrix, gin_average_diffusion, max_degree
from .io import csv_text
from .linalg import spectral_norm, stable_rank_ratio
from .model import LOSS_KAPPAS, forward, get_activation, loss

log = logging.getLogger(__name__)

LIMIT_WINDOW = 1e-6
ALPHA_FLOOR = 1e-12
DEFAULT_B_FLOOR = 5.4
DEFAULT_EPSILON = 0.1
DEFAULT_DELTA = 0.1
REMAINDER_ORDER = "O(log(1/delta)/N^(3/4))"
REPORT_COLUMNS = ("model", "l", "bound", "value", "N", "B", "delta", "epsilon",
                  "gamma", "max_P_norm", "max_X_norm", "max_degree")


class NormMode(str, enum.Enum):
    ABSOLUTE = "absolute"
    DISTANCE_FROM_INIT = "distance_from_init"


class BoundRefusal(ValueError):
    """The requested bound does not apply to this model."""


@dataclass(frozen=True)
class HypothesisNorms:
    """Per-layer ``s_i`` (spectral norm) and ``r_i`` (stable-rank ratio), both >= 1.

    ``clamped`` records the layers whose measured value fell below 1.
    ``head_s``/``head_r`` describe GIN heads when present.
    """

    s: tuple
    r: tuple
    mode: NormMode = NormMode.ABSOLUTE
    clamped: tuple = ()
    head_s: float = None
    head_r: float = None

    def __post_init__(self):
        if len(self.s) != len(self.r):
            raise ValueError("s and r must have one entry per layer")
        if any(v < 1 for v in self.s) or any(v < 1 for v in self.r):
            raise ValueError("norm bounds must be >= 1")

    @property
    def layers(self):
        return len(self.s)


def _clamp(value, what, clamped):
    if value < 1.0:
        clamped.append(what)
        log.info("%s = %.4g clamped to 1", what, value)
        return 1.0
    return float(value)


def measure_norms(model, init_model=None):
    """Measure ``s_i = max(||W_i||, ||U_i||, 1)`` and ``r_i`` likewise from stable ranks.

    With ``init_model`` the norms of ``W - W_init`` and ``U - U_init`` are used.
    """
    if init_model is not None:
        if (init_model.widths != model.widths
                or (init_model.U is None) != (model.U is None)
                or (init_model.V is None) != (model.V is None)):
            raise ValueError("init_model does not match the model's shapes")
        mode = NormMode.DISTANCE_FROM_INIT
    else:
        mode = NormMode.ABSOLUTE

    def delta(mats, base, t):
        m = mats[t]
        return m - base[t] if base is not None else m

    s, r, clamped = [], [], []
    for t in range(model.layers):
        mats = [delta(model.W, init_model.W if init_model else None, t)]
        if model.U is not None and t < model.layers - 1:
            mats.append(delta(model.U, init_model.U if init_model else None, t))
        s_t = max(spectral_norm(m) for m in mats)
        r_t = max(stable_rank_ratio(m) for m in mats)
        s.append(_clamp(s_t, f"s_{t + 1}", clamped))
        r.append(_clamp(r_t, f"r_{t + 1}", clamped))
    head_s = head_r = None
    if model.V is not None:
        heads = [delta(model.V, init_model.V if init_model else None, t)
                 for t in range(len(model.V))]
        head_s = _clamp(max(spectral_norm(v) for v in heads), "s_V", clamped)
        head_r = _clamp(max(stable_rank_ratio(v) for v in heads), "r_V", clamped)
    return HypothesisNorms(tuple(s), tuple(r), mode, tuple(clamped), head_s, head_r)


# -- dataset statistics ------------------------------------------------------

@dataclass(frozen=True)
class DatasetStats:
    max_X_norm: float
    max_P_norm: float
    max_degree: int
    N: int
    B: float
    k: int
    h: int
    n_max: int
    max_P_gin_norm: float = None

    def __post_init__(self):
        if self.max_X_norm < 0 or self.max_P_norm < 0:
            raise ValueError("norms must be non-negative")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not self.B > 0:
            raise ValueError("B must be positive")


def observed_max_loss(model, examples, kind="binary_logistic"):
    return max(loss(forward(model, ex)[0], ex.y, kind) for ex in examples)


def dataset_stats(examples, kind, widths, N=None, B=None, B_floor=DEFAULT_B_FLOOR,
                  layers=None, model=None, loss_kind="binary_logistic",
                  extra_loss_examples=()):
    """Empirical max statistics over ``examples``.

    ``B`` defaults to ``max(observed max loss, B_floor)`` when a model is given,
    otherwise to ``B_floor``.  ``N`` defaults to ``len(examples)``.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("empty dataset")
    kind = DiffusionKind(kind)
    l = layers if layers is not None else len(widths) - 1
    max_x = max(spectral_norm(ex.X) for ex in examples)
    p_kind = DiffusionKind.ADJACENCY if kind is DiffusionKind.GIN_AVERAGE else kind
    mats = [diffusion_matrix(ex.G, p_kind) for ex in examples]
    max_p = max(spectral_norm(P) for P in mats)
    max_p_gin = max(spectral_norm(gin_average_diffusion(P, l)) for P in mats)
    if B is None:
        B = B_floor
        if model is not None:
            B = max(B, observed_max_loss(model, examples + list(extra_loss_examples),
                                         loss_kind))
    return DatasetStats(
        max_X_norm=max_x,
        max_P_norm=max_p,
        max_degree=max(max_degree(ex.G) for ex in examples),
        N=int(N if N is not None else len(examples)),
        B=float(B),
        k=int(widths[-1]),
        h=int(max(widths[1:-1])) if len(widths) > 2 else int(widths[0]),
        n_max=max(ex.G.n for ex in examples),
        max_P_gin_norm=max_p_gin,
    )


# -- constants ---------------------------------------------------------------

def _near_one(kappa0):
    if not kappa0 > 0:
        raise ValueError("kappa0 must be positive")
    return abs(kappa0 - 1.0) < LIMIT_WINDOW


def _check_depth(l):
    if int(l) != l or l < 2:
        raise ValueError(f"depth l must be an integer >= 2, got {l}")


def tilde_C(kappa0, l):
    """Depth constant of the main bound (the larger of ``C'`` and ``C_l``)."""
    _check_depth(l)
    if _near_one(kappa0):
        return 0.5 * l ** 3
    k = float(kappa0)
    return (k ** (3 * l) - 1) * (k ** (1.5 * (l - 1)) - 1) ** 2 / (k - 1) ** 3


def C_prime(kappa0, l):
    """Constant of the analytic trace bound for layers ``1..l-1``."""
    _check_depth(l)
    if _near_one(kappa0):
        return 4.0 / 9.0 * l ** 3
    k = float(kappa0)
    return (k ** (3 * l) - 1) * (k ** (1.5 * (l - 1)) - 1) ** 2 / (k - 1) ** 3


def C_l(kappa0, l):
    """Constant of the analytic trace bound for the readout layer."""
    _check_depth(l)
    if _near_one(kappa0):
        return float(l ** 2)
    k = float(kappa0)
    return k ** 2 * (k ** (3 * (l - 1)) - 1) ** 2 / (k - 1) ** 2


def C_ij(kappa0, i, j):
    if j < i:
        raise ValueError("need j >= i")
    if _near_one(kappa0):
        return float(3 * (j - i) + 2)
    k = float(kappa0)
    return k ** (3 * (j - i + 1)) * (k ** (3 * (j - i) + 2) - 1) / (k - 1)


def C_hat_ij(kappa0, i, j):
    if j < i:
        raise ValueError("need j >= i")
    if _near_one(kappa0):
        return float(3 * (j - i) + 1)
    k = float(kappa0)
    return k ** (3 * (j - i)) * (k ** (3 * (j - i) + 1) - 1) / (k - 1)


def combined_kappas(model, loss_kind="binary_logistic"):
    """Entrywise max of the Lipschitz constants over all activations and the loss."""
    acts = {a for triple in model.activations for a in triple}
    objs = [get_activation(a) for a in acts]
    bad = [a.name for a in objs if not a.smooth]
    if bad:
        raise BoundRefusal(f"bounds need smooth activations; got {sorted(bad)}")
    lk = LOSS_KAPPAS[loss_kind]
    return tuple(max([lk[j]] + [getattr(a, f"kappa{j}") for a in objs]) for j in range(3))


# -- our bounds --------------------------------------------------------------

def _graph_factor(p_norm, l):
    return max(1.0, p_norm) ** (2 * (l - 1))


def _check_common(norms, l, widths):
    if norms.layers != l:
        raise ValueError(f"norms describe {norms.layers} layers, expected {l}")
    if len(widths) != l + 1:
        raise ValueError(f"expected {l + 1} widths (d_0..d_l), got {len(widths)}")


def _check_loss(empirical_loss, epsilon):
    if not (empirical_loss >= 0 and math.isfinite(empirical_loss)):
        raise ValueError("empirical loss must be finite and >= 0")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")


def theorem1_terms(norms, stats, l, widths, kappas):
    """Per-layer square-root complexity terms of the main bound."""
    _check_common(norms, l, widths)
    kappa0, kappa1, _ = kappas
    C = tilde_C(kappa0, l) * kappa1 * stats.k
    prod_s2 = float(np.prod(np.square(norms.s)))
    common = (C * stats.B * stats.max_X_norm ** 2
              * _graph_factor(stats.max_P_norm, l) * prod_s2 / stats.N)
    return [math.sqrt(common * widths[i] * norms.r[i - 1] ** 2) for i in range(1, l + 1)]


def theorem1_bound(empirical_loss, norms, stats, l, widths, delta=DEFAULT_DELTA,
                   epsilon=DEFAULT_EPSILON, kappas=None, smooth=True):
    """``(1+eps) L + sum_i sqrt(C B d_i max||X||^2 max(1,||P||)^(2(l-1)) r_i^2 prod s_j^2 / N)``.

    The ``log(1/delta)/N^(3/4)`` remainder is not included (its constant is not
    known); ``delta`` is accepted so reports carry it.
    """
    if not smooth:
        raise BoundRefusal("the bound requires twice-differentiable activations (ReLU refused)")
    if kappas is None:
        raise ValueError("kappas (kappa0, kappa1, kappa2) are required")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    _check_loss(empirical_loss, epsilon)
    return (1 + epsilon) * empirical_loss + sum(theorem1_terms(norms, stats, l, widths, kappas))


def hessian_terms(norms, alphas, B, N):
    if len(alphas) != norms.layers:
        raise ValueError(f"need {norms.layers} alphas, got {len(alphas)}")
    if any(a < 0 for a in alphas):
        raise ValueError("alphas must be >= 0")
    return [math.sqrt(B * a * s ** 2 * r ** 2 / N)
            for a, s, r in zip(alphas, norms.s, norms.r)]


def hessian_pacbayes_bound(empirical_loss, norms, alphas, B, N, epsilon=DEFAULT_EPSILON):
    """``(1+eps) L + (1+eps) sum_i sqrt(B alpha_i s_i^2 r_i^2 / N)``; remainder omitted."""
    _check_loss(empirical_loss, epsilon)
    return (1 + epsilon) * (empirical_loss + sum(hessian_terms(norms, alphas, B, N)))


def trace_upper_bound(norms, stats, kappas, l, widths, layer):
    """Analytic upper bound on the loss-Hessian trace of layer ``layer``."""
    _check_common(norms, l, widths)
    if not 1 <= layer <= l:
        raise ValueError(f"layer must be in 1..{l}, got {layer}")
    kappa0, kappa1, _ = kappas
    const = C_l(kappa0, l) if layer == l else C_prime(kappa0, l)
    others = float(np.prod([s ** 2 for t, s in enumerate(norms.s, start=1) if t != layer]))
    return (const * stats.max_X_norm ** 2 * kappa1 * widths[layer] * stats.k
            * max(1.0, stats.max_P_norm ** (2 * (l - 1))) * others)


def gin_bound(empirical_gin_loss, norms, stats, l, widths, epsilon=DEFAULT_EPSILON,
              kappas=None):
    """GIN bound with ``P_GIN`` and head norms ``max ||V_j||`` in place of ``s_l``.

    The constant is ``2 tilde_C kappa1 k`` and the readout dimension is ``k``.
    """
    if norms.head_s is None:
        raise ValueError("GIN heads are absent; measure norms on a model with V heads")
    if stats.max_P_gin_norm is None:
        raise ValueError("stats carry no P_GIN norm")
    if kappas is None:
        raise ValueError("kappas are required")
    _check_common(norms, l, widths)
    _check_loss(empirical_gin_loss, epsilon)
    kappa0, kappa1, _ = kappas
    C = 2.0 * tilde_C(kappa0, l) * kappa1 * stats.k
    s = list(norms.s[:-1]) + [norms.head_s]
    r = list(norms.r[:-1]) + [norms.head_r]
    d = list(widths[1:l]) + [stats.k]
    common = (stats.B * C * stats.max_X_norm ** 2 * max(1.0, stats.max_P_gin_norm) ** 2
              * float(np.prod(np.square(s))) / stats.N)
    return (1 + epsilon) * empirical_gin_loss + sum(
        math.sqrt(common * d_i * r_i ** 2) for d_i, r_i in zip(d, r))


# -- prior-work baselines ----------------------------------------------------

def _geometric(ratio, l):
    """``(ratio^(l-1) - 1) / (ratio - 1)`` with the limit ``l - 1`` at ratio 1."""
    if abs(ratio - 1.0) < LIMIT_WINDOW:
        return float(l - 1)
    return (ratio ** (l - 1) - 1) / (ratio - 1)


def _check_tied(norms, tied):
    if not tied:
        raise BoundRefusal("the baseline bounds apply to weight-tied models only")
    l = norms.layers
    if any(abs(norms.s[i] - norms.s[0]) > 1e-12 * norms.s[0] for i in range(l - 1)):
        raise BoundRefusal("weight tying requires s_i = s_1 for layers 1..l-1")


def _check_margin(gamma):
    if not gamma > 0:
        raise ValueError("margin gamma must be positive; pass an explicit value")


def liao_bound(norms, stats, l, gamma, h=None, tied=True):
    """PAC-Bayes margin baseline for weight-tied MPNNs."""
    _check_tied(norms, tied)
    _check_margin(gamma)
    h = stats.h if h is None else h
    d = stats.max_degree
    s1, sl = norms.s[0], norms.s[l - 1]
    r1, rl = norms.r[0], norms.r[l - 1]
    zeta = min(s1, sl)
    lam = s1 * sl
    xi = _geometric(d * s1, l)
    growth = max(zeta ** (1 - l), (lam * xi) ** ((l + 1) / l))
    return math.sqrt(42 ** 2 / (gamma ** 2 * stats.N) * stats.max_X_norm ** 2 * growth ** 2
                     * l ** 2 * h * math.log(4 * l * h)
                     * (2 * s1 ** 2 * r1 ** 2 + sl ** 2 * rl ** 2))


def garg_bound(norms, stats, l, gamma, h=None, phi_sup=1.0, tied=True):
    """Rademacher baseline for weight-tied MPNNs.

    ``phi_sup`` is ``max ||phi(x)||_inf`` (1 for tanh); the feature constant is
    ``max ||X||^2`` from ``stats``.
    """
    _check_tied(norms, tied)
    _check_margin(gamma)
    h = stats.h if h is None else h
    d = stats.max_degree
    s1, sl = norms.s[0], norms.s[l - 1]
    k1 = float(phi_sup)
    k2 = stats.max_X_norm ** 2
    M = _geometric(d * s1, l)
    R = d * min(k1 * math.sqrt(h), k2 * s1 * M)
    Z = k2 * s1 + R * s1
    inner = 24 * sl * math.sqrt(stats.N) * max(Z, M * math.sqrt(h) * max(k2 * s1, R * s1))
    return 48 * sl * h * Z * math.sqrt(3 / (gamma ** 2 * stats.N) * math.log(inner))


# -- graph dependence --------------------------------------------------------

class Family(str, enum.Enum):
    GCN = "GCN"
    MPNN = "MPNN"
    GIN = "GIN"
    SAGE_MEAN = "SAGE_Mean"


@dataclass(frozen=True)
class GraphDependence:
    ours: float
    prior_full: float
    prior_sqrt: float


def graph_dependence(family, G, l, self_loops=False):
    """Graph factor of our bound next to the ``d^(l-1)`` and ``d^((l-1)/2)`` factors.

    ``self_loops`` uses ``A + I`` for the MPNN and GIN rows; ``d`` is always the
    degree of ``G`` itself.
    """
    _check_depth(l)
    family = Family(family)
    d = max_degree(G)
    A = G.with_self_loops().adjacency() if self_loops else G.adjacency()
    if family is Family.GCN:
        ours = 1.0
    elif family is Family.MPNN:
        ours = spectral_norm(A) ** (l - 1)
    elif family is Family.GIN:
        a = spectral_norm(A)
        ours = sum(a ** i for i in range(1, l)) / (l - 1)
    else:
        ours = spectral_norm(diffusion_matrix(G, DiffusionKind.ROW_NORMALIZED)) ** (l - 1)
    return GraphDependence(float(ours), float(d) ** (l - 1), float(d) ** ((l - 1) / 2))


# -- optimal noise -----------------------------------------------------------

def optimal_sigma(norms, alphas, B, N, beta=None, epsilon=DEFAULT_EPSILON, sigma_max=10.0):
    """Per-layer noise std ``sigma_i`` with ``sigma_i^2 = s_i r_i/(1-beta) sqrt(B/(alpha_i N))``.

    ``beta`` defaults to ``1/(1+epsilon)``.  Layers with ``alpha_i`` at or below
    1e-12 get ``sigma_max``.
    """
    if beta is None:
        beta = 1.0 / (1.0 + epsilon)
    if not 0 <= beta < 1:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if len(alphas) != norms.layers:
        raise ValueError(f"need {norms.layers} alphas, got {len(alphas)}")
    out = []
    for i, (a, s, r) in enumerate(zip(alphas, norms.s, norms.r), start=1):
        if a <= ALPHA_FLOOR:
            log.warning("layer %d: alpha %.3e at floor; sigma capped at %g", i, a, sigma_max)
            out.append(float(sigma_max))
            continue
        var = s * r / (1 - beta) * math.sqrt(B / (a * N))
        out.append(min(math.sqrt(var), float(sigma_max)))
    return tuple(out)


# -- reports -----------------------------------------------------------------

@dataclass
class BoundReport:
    model: str
    l: int
    stats: DatasetStats
    delta: float
    epsilon: float
    gamma: float
    values: dict = field(default_factory=dict)
    sigma: tuple = ()
    omitted_remainder_order: str = REMAINDER_ORDER

    def add(self, name, value):
        value = float(value)
        if not (math.isfinite(value) and value >= 0):
            raise ValueError(f"bound {name!r} is not a finite non-negative number: {value}")
        self.values[name] = value

    def rows(self):
        for name, value in self.values.items():
            yield {
                "model": self.model, "l": self.l, "bound": name, "value": value,
                "N": self.stats.N, "B": self.stats.B, "delta": self.delta,
                "epsilon": self.epsilon, "gamma": self.gamma,
                "max_P_norm": self.stats.max_P_norm, "max_X_norm": self.stats.max_X_norm,
                "max_degree": self.stats.max_degree,
            }

    def to_csv(self, reports=None):
        rows = [row for rep in (reports or [self]) for row in rep.rows()]
        return csv_text(REPORT_COLUMNS, rows, schema="bounds")

    def to_dict(self):
        return {
            "model": self.model, "l": self.l, "delta": self.delta,
            "epsilon": self.epsilon, "gamma": self.gamma,
            "values": dict(self.values), "sigma": list(self.sigma),
            "stats": asdict(self.stats),
            "omitted_remainder_order": self.omitted_remainder_order,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)
