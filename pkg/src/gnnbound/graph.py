"""Graphs, diffusion matrices and synthetic generators."""

import enum
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .linalg import spectral_norm


@dataclass(frozen=True)
class Graph:
    """Undirected graph on nodes ``0..n-1``; edges stored as sorted ``(i, j)``, ``i <= j``."""

    n: int
    edges: tuple

    def __init__(self, n, edges=()):
        n = int(n)
        if n < 1:
            raise ValueError(f"graph needs at least one node, got n={n}")
        canon = set()
        for e in edges:
            i, j = (int(x) for x in e)
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={n}")
            pair = (i, j) if i <= j else (j, i)
            if pair in canon:
                raise ValueError(f"duplicate edge {pair}")
            canon.add(pair)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "edges", tuple(sorted(canon)))

    @property
    def num_edges(self):
        return len(self.edges)

    def adjacency(self):
        A = np.zeros((self.n, self.n))
        for i, j in self.edges:
            A[i, j] = 1.0
            A[j, i] = 1.0
        return A

    def degrees(self):
        """Incident-edge counts; a self-loop contributes 1."""
        deg = np.zeros(self.n, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            if j != i:
                deg[j] += 1
        return deg

    def with_self_loops(self):
        loops = [(i, i) for i in range(self.n)]
        return Graph(self.n, set(self.edges) | set(loops))

    def relabel(self, perm):
        """Graph with node ``i`` renamed to ``perm[i]``."""
        perm = [int(p) for p in perm]
        return Graph(self.n, [(perm[i], perm[j]) for i, j in self.edges])

    def to_dict(self):
        return {"n": self.n, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["n"], [tuple(e) for e in obj["edges"]])

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(",", ":"))


class DiffusionKind(str, enum.Enum):
    ADJACENCY = "adj"
    ADJACENCY_SELF_LOOPS = "adj_sl"
    ROW_NORMALIZED = "row"
    SYM_NORMALIZED_SELF_LOOPS = "sym"
    GIN_AVERAGE = "gin"


def _check_kind(kind, layers):
    kind = DiffusionKind(kind)
    if kind is DiffusionKind.GIN_AVERAGE and (layers is None or layers < 2):
        raise ValueError("GIN averaging needs a layer count l >= 2")
    return kind


def diffusion_matrix(G, kind, layers=None):
    """Dense ``n x n`` diffusion matrix of ``G``.

    ``layers`` is only used by ``GIN_AVERAGE``, which averages ``A, ..., A^(l-1)``.
    """
    kind = _check_kind(kind, layers)
    A = G.adjacency()
    if kind is DiffusionKind.ADJACENCY:
        return A
    if kind is DiffusionKind.ADJACENCY_SELF_LOOPS:
        return A + np.eye(G.n)
    if kind is DiffusionKind.ROW_NORMALIZED:
        deg = A.sum(axis=1)
        isolated = np.flatnonzero(deg == 0)
        if isolated.size:
            raise ValueError(
                f"row normalisation undefined: node {int(isolated[0])} is isolated"
            )
        return A / deg[:, None]
    if kind is DiffusionKind.SYM_NORMALIZED_SELF_LOOPS:
        At = A + np.eye(G.n)
        inv_sqrt = 1.0 / np.sqrt(At.sum(axis=1))
        return inv_sqrt[:, None] * At * inv_sqrt[None, :]
    return gin_average_diffusion(A, layers)


def gin_average_diffusion(P, layers):
    """``(P + P^2 + ... + P^(l-1)) / (l-1)``."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"P must be square, got shape {P.shape}")
    if layers < 2:
        raise ValueError("layers must be >= 2")
    power = P.copy()
    total = P.copy()
    for _ in range(layers - 2):
        power = power @ P
        total += power
    return total / (layers - 1)


def max_degree(G):
    deg = G.degrees()
    return int(deg.max()) if deg.size else 0


class FactA1(NamedTuple):
    sqrt_d: float
    norm_A: float
    d: float
    norm_sym: float


def fact_a1_check(G):
    """Quantities of the adjacency spectral sandwich ``sqrt(d) <= ||A|| <= d``
    and of the symmetric-normalised bound ``||D^-1/2 (A+I) D^-1/2|| <= 1``."""
    if G.num_edges == 0:
        raise ValueError("graph has no edges")
    d = float(max_degree(G))
    norm_A = spectral_norm(G.adjacency())
    norm_sym = spectral_norm(diffusion_matrix(G, DiffusionKind.SYM_NORMALIZED_SELF_LOOPS))
    return FactA1(float(np.sqrt(d)), norm_A, d, norm_sym)


# -- generators -------------------------------------------------------------

FAMILIES = ("star", "complete", "cycle", "erdos_renyi", "ego_collab")


def _check_prob(name, p):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p}")


def generate(family, params=None, seed=0):
    """Build a synthetic graph; deterministic for a fixed ``seed``.

    Families and their parameters:

    * ``star``: ``d`` leaves around hub 0
    * ``complete``: ``n`` nodes
    * ``cycle``: ``n`` nodes (``n >= 3``)
    * ``erdos_renyi``: ``n``, ``p``
    * ``ego_collab``: ``n``, ``communities``, ``p_in``, ``p_out``; node 0 is
      the ego, linked to everyone, and the alters form dense collaboration
      cliques with sparse cross links, giving a few heavy-degree hubs.
    """
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    if family == "star":
        d = int(params.get("d", 5))
        if d < 1:
            raise ValueError("star needs d >= 1")
        return Graph(d + 1, [(0, i) for i in range(1, d + 1)])
    if family == "complete":
        n = int(params.get("n", 5))
        if n < 1:
            raise ValueError("n must be >= 1")
        return Graph(n, [(i, j) for i in range(n) for j in range(i + 1, n)])
    if family == "cycle":
        n = int(params.get("n", 5))
        if n < 3:
            raise ValueError("cycle needs n >= 3")
        return Graph(n, [(i, (i + 1) % n) for i in range(n)])
    if family == "erdos_renyi":
        n = int(params.get("n", 20))
        p = float(params.get("p", 0.1))
        if n < 1:
            raise ValueError("n must be >= 1")
        _check_prob("p", p)
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(iu.size) < p
        return Graph(n, zip(iu[keep].tolist(), ju[keep].tolist()))
    if family == "ego_collab":
        n = int(params.get("n", 30))
        communities = int(params.get("communities", 3))
        p_in = float(params.get("p_in", 0.7))
        p_out = float(params.get("p_out", 0.02))
        if n < 2:
            raise ValueError("ego_collab needs n >= 2")
        if communities < 1:
            raise ValueError("communities must be >= 1")
        _check_prob("p_in", p_in)
        _check_prob("p_out", p_out)
        alters = np.arange(1, n)
        group = rng.integers(0, communities, size=alters.size)
        edges = [(0, int(a)) for a in alters]
        iu, ju = np.triu_indices(alters.size, k=1)
        same = group[iu] == group[ju]
        prob = np.where(same, p_in, p_out)
        keep = rng.random(iu.size) < prob
        edges += [(int(alters[a]), int(alters[b])) for a, b in zip(iu[keep], ju[keep])]
        return Graph(n, edges)
    raise ValueError(f"unknown graph family {family!r}; expected one of {FAMILIES}")
