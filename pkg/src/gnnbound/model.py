"""Message-passing GNN forward/backward passes, losses and weight noise.

Layer ``t = 1..l-1``::

    H_t = phi_t(X U_t + rho_t(P psi_t(H_{t-1})) W_t),   H_0 = X

and the readout is ``(1/n) 1^T H_{l-1} W_l``.  GIN heads read every hidden
layer: ``o_i = (1/n) 1^T H_i V_i``.
"""

import json
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .graph import DiffusionKind, Graph, diffusion_matrix

CHECKPOINT_VERSION = 1


# -- activations -------------------------------------------------------------

def _grid_kappas(d1, d2, d3, lo=-10.0, hi=10.0, num=200_001):
    x = np.linspace(lo, hi, num)
    return (float(np.max(np.abs(d1(x)))), float(np.max(np.abs(d2(x)))),
            float(np.max(np.abs(d3(x)))))


@dataclass(frozen=True)
class Activation:
    """Entrywise activation with its derivatives.

    ``kappa0..kappa2`` are Lipschitz constants of the map, its first and its
    second derivative; they are measured on a dense grid, not typed in.
    """

    name: str
    value: object = field(repr=False)
    d1: object = field(repr=False)
    d2: object = field(repr=False)
    kappa0: float
    kappa1: float
    kappa2: float
    smooth: bool = True


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _make_tanh(scale=1.0):
    a = float(scale)

    def value(x):
        return np.tanh(a * x) / a

    def d1(x):
        return 1.0 - np.tanh(a * x) ** 2

    def d2(x):
        t = np.tanh(a * x)
        return -2.0 * a * t * (1.0 - t * t)

    def d3(x):
        t = np.tanh(a * x)
        return -2.0 * a * a * (1.0 - t * t) * (1.0 - 3.0 * t * t)

    name = "tanh" if a == 1.0 else f"tanh:{a:g}"
    return Activation(name, value, d1, d2, *_grid_kappas(d1, d2, d3))


def _make_sigmoid():
    def value(x):
        return _sigmoid(x) - 0.5

    def d1(x):
        s = _sigmoid(x)
        return s * (1.0 - s)

    def d2(x):
        s = _sigmoid(x)
        return s * (1.0 - s) * (1.0 - 2.0 * s)

    def d3(x):
        s = _sigmoid(x)
        return s * (1.0 - s) * (1.0 - 6.0 * s + 6.0 * s * s)

    return Activation("sigmoid", value, d1, d2, *_grid_kappas(d1, d2, d3))


def _make_identity():
    return Activation("identity", lambda x: x, np.ones_like, np.zeros_like, 1.0, 0.0, 0.0)


def _make_relu():
    return Activation(
        "relu",
        lambda x: np.maximum(x, 0.0),
        lambda x: (x > 0).astype(np.float64),
        np.zeros_like,
        1.0,
        math.inf,
        math.inf,
        smooth=False,
    )


_ACTIVATIONS = {}


def get_activation(name):
    """Look up ``tanh``, ``tanh:<scale>``, ``sigmoid``, ``identity`` or ``relu``."""
    if isinstance(name, Activation):
        return name
    if name not in _ACTIVATIONS:
        base, _, arg = name.partition(":")
        if base == "tanh":
            act = _make_tanh(float(arg) if arg else 1.0)
        elif base == "sigmoid" and not arg:
            act = _make_sigmoid()
        elif base == "identity" and not arg:
            act = _make_identity()
        elif base == "relu" and not arg:
            act = _make_relu()
        else:
            raise ValueError(f"unknown activation {name!r}")
        _ACTIVATIONS[name] = act
    return _ACTIVATIONS[name]


# -- losses ------------------------------------------------------------------

LOSS_KINDS = ("binary_logistic", "softmax_cross_entropy", "linear")

# (kappa0, kappa1, kappa2) per output coordinate
LOSS_KAPPAS = {
    "binary_logistic": (1.0, 0.25, 1.0 / (6.0 * math.sqrt(3.0))),
    "softmax_cross_entropy": (1.0, 0.25, 1.0),
    "linear": (1.0, 0.0, 0.0),
}


def _check_label(y, k):
    if not 0 <= int(y) < k:
        raise ValueError(f"label {y} out of range for {k} classes")


def loss(output, y, kind="binary_logistic"):
    """Loss of one output vector.

    ``binary_logistic`` acts on the logit difference ``o_1 - o_0``;
    ``linear`` (``-o_y``) is a curvature-free probe for tests and is not bounded.
    """
    o = np.asarray(output, dtype=np.float64)
    _check_label(y, o.size)
    if kind == "binary_logistic":
        if o.size != 2:
            raise ValueError("binary_logistic needs a 2-dim output")
        sign = 1.0 if y == 1 else -1.0
        return float(np.logaddexp(0.0, -sign * (o[1] - o[0])))
    if kind == "softmax_cross_entropy":
        top = o.max()
        return float(top + np.log(np.sum(np.exp(o - top))) - o[y])
    if kind == "linear":
        return float(-o[y])
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_grad(output, y, kind="binary_logistic"):
    """Gradient of :func:`loss` with respect to the output vector."""
    o = np.asarray(output, dtype=np.float64)
    _check_label(y, o.size)
    g = np.zeros_like(o)
    if kind == "binary_logistic":
        sign = 1.0 if y == 1 else -1.0
        dm = -_sigmoid(-sign * (o[1] - o[0]))
        g[1] = sign * dm
        g[0] = -sign * dm
        return g
    if kind == "softmax_cross_entropy":
        p = np.exp(o - o.max())
        p /= p.sum()
        p[y] -= 1.0
        return p
    if kind == "linear":
        g[y] = -1.0
        return g
    raise ValueError(f"unknown loss kind {kind!r}")


def margin(output, y):
    """Classification margin ``o_y - max_{j != y} o_j``."""
    o = np.asarray(output, dtype=np.float64)
    others = np.delete(o, int(y))
    return float(o[int(y)] - others.max())


# -- data --------------------------------------------------------------------

@dataclass(eq=False)
class DatasetExample:
    X: np.ndarray
    G: Graph
    y: int
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[0] != self.G.n:
            raise ValueError(
                f"feature matrix has shape {self.X.shape}, graph has {self.G.n} nodes"
            )
        self.y = int(self.y)
        if self.y < 0:
            raise ValueError("labels must be non-negative")

    def diffusion(self, kind, layers=None):
        key = (DiffusionKind(kind), layers)
        if key not in self._cache:
            self._cache[key] = diffusion_matrix(self.G, kind, layers)
        return self._cache[key]


# -- model -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MpnnModel:
    """Weights and wiring of an ``l``-layer MPNN.

    ``W`` has ``l`` matrices (``W[t-1]`` is ``d_{t-1} x d_t``), ``U`` has
    ``l - 1`` matrices of shape ``d_0 x d_t`` or is ``None`` for GCN-style
    models without the skip term, ``V`` holds optional GIN heads
    (``d_t x k``).  ``activations[t-1]`` is the ``(phi, rho, psi)`` name triple
    of layer ``t``.  With ``weight_tying`` the first ``l - 1`` ``W`` (and
    ``U``) entries are one shared matrix.
    """

    W: tuple
    U: tuple = None
    V: tuple = None
    activations: tuple = None
    kind: DiffusionKind = DiffusionKind.SYM_NORMALIZED_SELF_LOOPS
    weight_tying: bool = False

    def __post_init__(self):
        W = tuple(np.ascontiguousarray(w, dtype=np.float64) for w in self.W)
        l = len(W)
        if l < 2:
            raise ValueError("an MPNN needs l >= 2 layers")
        object.__setattr__(self, "W", W)
        for t in range(1, l):
            if W[t - 1].shape[1] != W[t].shape[0]:
                raise ValueError(
                    f"layer {t + 1}: W has {W[t].shape[0]} rows but layer {t} "
                    f"outputs {W[t - 1].shape[1]} columns"
                )
        d0 = W[0].shape[0]
        if self.U is not None:
            U = tuple(np.ascontiguousarray(u, dtype=np.float64) for u in self.U)
            if len(U) != l - 1:
                raise ValueError(f"expected {l - 1} U matrices, got {len(U)}")
            for t, u in enumerate(U, start=1):
                if u.shape != (d0, W[t - 1].shape[1]):
                    raise ValueError(
                        f"layer {t}: U has shape {u.shape}, expected {(d0, W[t - 1].shape[1])}"
                    )
            object.__setattr__(self, "U", U)
        if self.V is not None:
            V = tuple(np.ascontiguousarray(v, dtype=np.float64) for v in self.V)
            if len(V) != l - 1:
                raise ValueError(f"expected {l - 1} GIN heads, got {len(V)}")
            k = W[-1].shape[1]
            for t, v in enumerate(V, start=1):
                if v.shape != (W[t - 1].shape[1], k):
                    raise ValueError(
                        f"head {t}: V has shape {v.shape}, expected {(W[t - 1].shape[1], k)}"
                    )
            object.__setattr__(self, "V", V)
        acts = self.activations
        if acts is None:
            acts = (("tanh", "tanh", "tanh"),) * (l - 1)
        elif len(acts) == 3 and all(isinstance(a, str) for a in acts):
            acts = (tuple(acts),) * (l - 1)
        acts = tuple(tuple(a) for a in acts)
        if len(acts) != l - 1 or any(len(a) != 3 for a in acts):
            raise ValueError("activations must hold one (phi, rho, psi) triple per layer")
        for triple in acts:
            for name in triple:
                get_activation(name)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "kind", DiffusionKind(self.kind))
        if self.weight_tying:
            for t in range(1, l - 1):
                if W[t].shape != W[0].shape or not np.array_equal(W[t], W[0]):
                    raise ValueError("weight tying requires identical W for layers 1..l-1")
                if self.U is not None and not np.array_equal(self.U[t], self.U[0]):
                    raise ValueError("weight tying requires identical U for layers 1..l-1")

    @property
    def layers(self):
        return len(self.W)

    @property
    def widths(self):
        return (self.W[0].shape[0],) + tuple(w.shape[1] for w in self.W)

    @property
    def num_classes(self):
        return self.W[-1].shape[1]

    def activation_objects(self, t):
        return tuple(get_activation(a) for a in self.activations[t - 1])

    def is_smooth(self):
        return all(get_activation(a).smooth for triple in self.activations for a in triple)

    def diffusion_layers(self):
        return self.layers if self.kind is DiffusionKind.GIN_AVERAGE else None


def init_model(widths, seed=0, scale=1.0, use_U=True, heads=False,
               activations=("tanh", "tanh", "tanh"),
               kind=DiffusionKind.SYM_NORMALIZED_SELF_LOOPS, weight_tying=False):
    """Gaussian init with ``N(0, scale^2 / fan_in)`` entries.

    ``widths = (d_0, d_1, ..., d_l)``.  With ``weight_tying`` all hidden widths
    must equal ``d_0`` and one shared ``W``/``U`` is drawn.
    """
    widths = tuple(int(w) for w in widths)
    l = len(widths) - 1
    rng = np.random.default_rng(seed)

    def draw(rows, cols):
        return rng.standard_normal((rows, cols)) * (scale / math.sqrt(rows))

    if weight_tying:
        if len(set(widths[:-1])) != 1:
            raise ValueError("weight tying needs d_0 = d_1 = ... = d_{l-1}")
        w = draw(widths[0], widths[1])
        W = [w] * (l - 1)
        U = [draw(widths[0], widths[1])] * (l - 1) if use_U else None
    else:
        W = [draw(widths[t - 1], widths[t]) for t in range(1, l)]
        U = [draw(widths[0], widths[t]) for t in range(1, l)] if use_U else None
    W.append(draw(widths[l - 1], widths[l]))
    V = [draw(widths[t], widths[l]) for t in range(1, l)] if heads else None
    return MpnnModel(tuple(W), None if U is None else tuple(U),
                     None if V is None else tuple(V), activations, kind, weight_tying)


# -- parameter layout --------------------------------------------------------

class Block(NamedTuple):
    name: str   # "W", "U" or "V"
    index: int  # 1-based layer (for tied W/U: 1, standing for layers 1..l-1)
    group: int  # layer group used for per-layer traces and noise scales


def param_blocks(model):
    """Free parameter blocks in flat-vector order."""
    l = model.layers
    blocks = []
    hidden = [1] if model.weight_tying else range(1, l)
    for t in hidden:
        blocks.append(Block("W", t, t))
        if model.U is not None:
            blocks.append(Block("U", t, t))
    blocks.append(Block("W", l, l))
    if model.V is not None:
        blocks.extend(Block("V", t, l) for t in range(1, l))
    return blocks


def _block_array(model, b):
    return getattr(model, b.name)[b.index - 1]


def flatten(model):
    return np.concatenate([_block_array(model, b).ravel() for b in param_blocks(model)])


def num_params(model):
    return sum(_block_array(model, b).size for b in param_blocks(model))


def group_slices(model):
    """``{group: index array}`` into the flat parameter vector."""
    out = {}
    pos = 0
    for b in param_blocks(model):
        size = _block_array(model, b).size
        out.setdefault(b.group, []).append(np.arange(pos, pos + size))
        pos += size
    return {g: np.concatenate(v) for g, v in out.items()}


def unflatten(model, vec):
    """Model with the same wiring and weights read from ``vec``."""
    vec = np.asarray(vec, dtype=np.float64)
    l = model.layers
    W = list(model.W)
    U = None if model.U is None else list(model.U)
    V = None if model.V is None else list(model.V)
    pos = 0
    for b in param_blocks(model):
        ref = _block_array(model, b)
        arr = vec[pos:pos + ref.size].reshape(ref.shape).copy()
        pos += ref.size
        if b.name == "W":
            if model.weight_tying and b.index < l:
                W[:l - 1] = [arr] * (l - 1)
            else:
                W[b.index - 1] = arr
        elif b.name == "U":
            if model.weight_tying:
                U[:] = [arr] * (l - 1)
            else:
                U[b.index - 1] = arr
        else:
            V[b.index - 1] = arr
    if pos != vec.size:
        raise ValueError(f"parameter vector has {vec.size} entries, model needs {pos}")
    return replace(model, W=tuple(W), U=None if U is None else tuple(U),
                   V=None if V is None else tuple(V))


# -- forward / backward ------------------------------------------------------

class Trace(NamedTuple):
    """Intermediates of one forward pass (all lists indexed by layer - 1)."""

    H: list   # H_0 .. H_{l-1}
    A: list   # psi(H_{t-1})
    B: list   # P A_t
    F: list   # rho(B_t)
    E: list   # X U_t + F_t W_t
    P: np.ndarray


def _forward_trace(model, example):
    X = example.X
    if X.shape[1] != model.widths[0]:
        raise ValueError(
            f"layer 1: features have {X.shape[1]} columns, model expects {model.widths[0]}"
        )
    P = example.diffusion(model.kind, model.diffusion_layers())
    H = [X]
    A, B, F, E = [], [], [], []
    for t in range(1, model.layers):
        phi, rho, psi = model.activation_objects(t)
        a = psi.value(H[-1])
        b = P @ a
        f = rho.value(b)
        e = f @ model.W[t - 1]
        if model.U is not None:
            e = e + X @ model.U[t - 1]
        H.append(phi.value(e))
        A.append(a)
        B.append(b)
        F.append(f)
        E.append(e)
    return Trace(H, A, B, F, E, P)


def forward(model, example):
    """``(output, [H_0, ..., H_{l-1}])``."""
    tr = _forward_trace(model, example)
    out = tr.H[-1].mean(axis=0) @ model.W[-1]
    return out, tr.H


def forward_gin(model, example):
    """Per-head outputs ``o_i = (1/n) 1^T H_i V_i`` for ``i = 1..l-1``."""
    if model.V is None:
        raise ValueError("model has no GIN heads")
    tr = _forward_trace(model, example)
    return [tr.H[t].mean(axis=0) @ model.V[t - 1] for t in range(1, model.layers)]


def gin_loss(model, example, kind="binary_logistic"):
    outs = forward_gin(model, example)
    return float(np.mean([loss(o, example.y, kind) for o in outs]))


def objective_value(model, example, kind="binary_logistic", gin=False):
    if gin:
        return gin_loss(model, example, kind)
    out, _ = forward(model, example)
    return loss(out, example.y, kind)


class Gradients(NamedTuple):
    W: list
    U: list
    V: list


def gradient(model, example, kind="binary_logistic", gin=False):
    """Exact reverse-mode gradient of the loss (or the averaged GIN loss).

    With weight tying every tied copy carries the summed gradient.
    """
    l = model.layers
    n = example.X.shape[0]
    tr = _forward_trace(model, example)
    gW = [None] * l
    gU = None if model.U is None else [None] * (l - 1)
    gV = None if model.V is None else [None] * (l - 1)

    # seed: derivative of the objective w.r.t. each H_t
    dH = [np.zeros_like(h) for h in tr.H]
    if gin:
        if model.V is None:
            raise ValueError("model has no GIN heads")
        gW[l - 1] = np.zeros_like(model.W[-1])
        for t in range(1, l):
            mean_h = tr.H[t].mean(axis=0)
            g = loss_grad(mean_h @ model.V[t - 1], example.y, kind) / (l - 1)
            gV[t - 1] = np.outer(mean_h, g)
            dH[t] += np.broadcast_to(model.V[t - 1] @ g / n, tr.H[t].shape)
    else:
        mean_h = tr.H[-1].mean(axis=0)
        g = loss_grad(mean_h @ model.W[-1], example.y, kind)
        gW[l - 1] = np.outer(mean_h, g)
        dH[l - 1] += np.broadcast_to(model.W[-1] @ g / n, tr.H[-1].shape)
        if gV is not None:
            gV = [np.zeros_like(v) for v in model.V]

    back = dH[l - 1]
    for t in range(l - 1, 0, -1):
        phi, rho, psi = model.activation_objects(t)
        dE = back * phi.d1(tr.E[t - 1])
        if gU is not None:
            gU[t - 1] = example.X.T @ dE
        gW[t - 1] = tr.F[t - 1].T @ dE
        if t > 1:
            dB = (dE @ model.W[t - 1].T) * rho.d1(tr.B[t - 1])
            back = (tr.P.T @ dB) * psi.d1(tr.H[t - 1]) + dH[t - 1]

    if model.weight_tying:
        total = sum(gW[:l - 1])
        gW[:l - 1] = [total] * (l - 1)
        if gU is not None:
            totU = sum(gU)
            gU = [totU] * (l - 1)
    return Gradients(gW, gU, gV)


def flatten_gradients(model, grads):
    return np.concatenate([getattr(grads, b.name)[b.index - 1].ravel()
                           for b in param_blocks(model)])


def loss_and_flat_grad(model, example, kind="binary_logistic", gin=False):
    grads = gradient(model, example, kind, gin)
    return objective_value(model, example, kind, gin), flatten_gradients(model, grads)


# -- noise -------------------------------------------------------------------

class NoiseRecord(NamedTuple):
    """Noise draw ``E`` in flat layout plus the unperturbed parameters."""

    E: np.ndarray
    base: np.ndarray


def sigma_vector(model, sigma):
    """Per-coordinate noise scale from a scalar or one scale per layer group."""
    slices = group_slices(model)
    out = np.zeros(num_params(model))
    if np.isscalar(sigma):
        sigma = [float(sigma)] * model.layers
    sigma = list(sigma)
    if len(sigma) != model.layers:
        raise ValueError(f"need {model.layers} noise scales, got {len(sigma)}")
    for g, idx in slices.items():
        if sigma[g - 1] < 0:
            raise ValueError("noise scales must be non-negative")
        out[idx] = sigma[g - 1]
    return out


def perturb(model, sigma, seed):
    """Add independent ``N(0, sigma_i^2)`` noise to every entry of layer ``i``.

    Tied matrices get a single draw, so a perturbed tied model stays tied.
    Returns ``(perturbed model, NoiseRecord)``; :func:`negate` gives the
    ``-E`` copy and :func:`restore` the original weights.
    """
    base = flatten(model)
    rng = np.random.default_rng(seed)
    E = rng.standard_normal(base.size) * sigma_vector(model, sigma)
    return unflatten(model, base + E), NoiseRecord(E, base)


def negate(model, record):
    return unflatten(model, record.base - record.E)


def restore(model, record):
    # (theta + E) - E is not bit-exact in floating point; keep the base copy
    return unflatten(model, record.base)


# -- checkpoints -------------------------------------------------------------

def model_to_dict(model):
    def mats(ms):
        return None if ms is None else [m.tolist() for m in ms]

    free_W = list(model.W)
    return {
        "format": "gnnbound-checkpoint",
        "version": CHECKPOINT_VERSION,
        "widths": list(model.widths),
        "diffusion": model.kind.value,
        "activations": [list(a) for a in model.activations],
        "weight_tying": bool(model.weight_tying),
        "W": mats(free_W),
        "U": mats(model.U),
        "V": mats(model.V),
    }


def model_from_dict(obj):
    if obj.get("format") != "gnnbound-checkpoint":
        raise ValueError("not a gnnbound checkpoint")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')}")

    def mats(ms):
        return None if ms is None else tuple(np.array(m, dtype=np.float64) for m in ms)

    model = MpnnModel(mats(obj["W"]), mats(obj["U"]), mats(obj["V"]),
                      tuple(tuple(a) for a in obj["activations"]),
                      DiffusionKind(obj["diffusion"]), bool(obj["weight_tying"]))
    if list(model.widths) != list(obj["widths"]):
        raise ValueError("checkpoint widths do not match weight shapes")
    return model


def save_checkpoint(model, path):
    from .io import atomic_write_text
    atomic_write_text(path, json.dumps(model_to_dict(model), separators=(",", ":")))


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
