"""Heterogeneous adjacency supports and the grid-node mapping.

Each city carries three symmetric priors (road connectivity, risk
co-occurrence, functional similarity) plus one learned adaptive relation,
giving four supports for graph message passing. The symmetric priors get the
D^-1/2 (A + s I) D^-1/2 normalization; the adaptive support is produced
row-stochastic by construction and is used as-is. A grid-node map projects
node embeddings onto grid cells by mean aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    AsymmetricSupportError,
    GridMapError,
    NegativeEntryError,
    RankRangeError,
    ShapeMismatchError,
)
from .tensor import Tensor

SYMMETRY_TOL = 1e-9
DEFAULT_SELF_LOOP = 1.0
DEFAULT_RANK = 8


def normalize_support(a: Tensor, self_loop: float = DEFAULT_SELF_LOOP) -> Tensor:
    """Symmetric degree normalization D^-1/2 (A + s I) D^-1/2.

    The self-loop strength ``s`` (default 1) keeps degrees positive for
    isolated nodes; pass 0 to normalize the raw matrix.
    """
    av = a.data
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise ShapeMismatchError(f"normalize_support: need square matrix, got {a.shape}")
    if np.max(np.abs(av - av.T)) > SYMMETRY_TOL:
        raise AsymmetricSupportError(
            f"normalize_support: matrix asymmetric beyond {SYMMETRY_TOL} (max dev {np.max(np.abs(av - av.T)):.2e})"
        )
    if av.min() < 0:
        raise NegativeEntryError(f"normalize_support: negative entry {av.min():.3g}")
    m = av + self_loop * np.eye(av.shape[0])
    deg = m.sum(axis=1)
    inv_sqrt = np.where(deg > 0, deg, 1.0) ** -0.5
    inv_sqrt = np.where(deg > 0, inv_sqrt, 0.0)
    return Tensor(inv_sqrt[:, None] * m * inv_sqrt[None, :])


def adaptive_adjacency(e1: Tensor, e2: Tensor) -> Tensor:
    """Learned support: row softmax of relu(E1 E2^T). Rows sum to 1.

    Differentiable: recorded on the active tape so gradients reach the
    embedding factors.
    """
    if e1.shape != e2.shape or e1.data.ndim != 2:
        raise ShapeMismatchError(f"adaptive_adjacency: embedding shapes {e1.shape} vs {e2.shape}")
    logits = T.relu(T.matmul(e1, T.transpose(e2, (1, 0))))
    return T.softmax_rows(logits)


def init_adaptive_embeddings(a_prior: Tensor, r: int):
    """Best rank-r factorization of a symmetric nonnegative prior via SVD.

    Returns (e1, e2) with e1 e2^T equal to the rank-r truncated SVD
    reconstruction of the prior (Eckart-Young optimal).
    """
    av = a_prior.data
    n = av.shape[0]
    if av.ndim != 2 or av.shape[1] != n:
        raise ShapeMismatchError(f"init_adaptive_embeddings: need square prior, got {a_prior.shape}")
    if not (1 <= r <= n):
        raise RankRangeError(f"init_adaptive_embeddings: rank {r} outside [1, {n}]")
    if np.max(np.abs(av - av.T)) > SYMMETRY_TOL:
        raise AsymmetricSupportError("init_adaptive_embeddings: prior is asymmetric")
    if av.min() < 0:
        raise NegativeEntryError("init_adaptive_embeddings: prior has negative entries")
    u, s, vt = np.linalg.svd(av)
    root = np.sqrt(s[:r])
    e1 = u[:, :r] * root[None, :]
    e2 = vt[:r, :].T * root[None, :]
    return Tensor(e1), Tensor(e2)


@dataclass
class SupportSet:
    """One city's support stack: three symmetric priors plus the adaptive one.

    ``adaptive_e1/e2`` hold the learnable factorization; ``adaptive_fixed``
    is only set on composed (block-diagonal) sets where the materialized
    matrix replaces the factors. ``normalized`` caches the three normalized
    priors; with the adaptive support materialized the stack has J=4 members.
    """

    road: Tensor
    risk: Tensor
    poi: Tensor
    adaptive_e1: Tensor | None = None
    adaptive_e2: Tensor | None = None
    adaptive_fixed: Tensor | None = None
    normalized: list = field(default_factory=list)

    def __post_init__(self):
        n = self.road.shape[0]
        for name in ("road", "risk", "poi"):
            m = getattr(self, name)
            if m.shape != (n, n):
                raise ShapeMismatchError(f"SupportSet: {name} shape {m.shape} != ({n}, {n})")
        if not self.normalized:
            self.normalized = [normalize_support(self.road), normalize_support(self.risk), normalize_support(self.poi)]

    @property
    def n(self) -> int:
        return self.road.shape[0]

    @property
    def rank(self) -> int:
        return self.adaptive_e1.shape[1] if self.adaptive_e1 is not None else 0

    def adaptive(self) -> Tensor:
        """Materialize the adaptive support (traced when factors are learnable)."""
        if self.adaptive_fixed is not None:
            return self.adaptive_fixed
        return adaptive_adjacency(self.adaptive_e1, self.adaptive_e2)

    def stack(self, e1: Tensor | None = None, e2: Tensor | None = None) -> list:
        """The J=4 message-passing supports; optional override of the factors
        lets the training loop pass its current parameter values."""
        if self.adaptive_fixed is not None:
            adp = self.adaptive_fixed
        elif e1 is not None:
            adp = adaptive_adjacency(e1, e2)
        else:
            adp = self.adaptive()
        return [*self.normalized, adp]


def make_support_set(road: Tensor, risk: Tensor, poi: Tensor | None, rank: int | None = None) -> SupportSet:
    """Validate priors, fill a missing functional-similarity prior with the
    identity (neutral message passing), and seed the adaptive factors from the
    road prior."""
    n = road.shape[0]
    if poi is None:
        poi = Tensor(np.eye(n))
    r = min(DEFAULT_RANK, n) if rank is None else rank
    e1, e2 = init_adaptive_embeddings(road, r)
    return SupportSet(road=road, risk=risk, poi=poi, adaptive_e1=e1, adaptive_e2=e2)


def block_diagonal(sets: list) -> SupportSet:
    """Compose per-city support sets into one block-diagonal set.

    All four support kinds are composed as materialized matrices with exactly
    zero cross-city blocks; the result carries a fixed adaptive matrix (a row
    softmax over concatenated factors could never produce zero off-blocks).
    """
    if not sets:
        raise ShapeMismatchError("block_diagonal: need at least one SupportSet")
    if len(sets) == 1:
        return sets[0]
    sizes = [s.n for s in sets]
    total = sum(sizes)

    def compose(mats):
        out = np.zeros((total, total))
        at = 0
        for m, n in zip(mats, sizes):
            out[at : at + n, at : at + n] = m.data
            at += n
        return Tensor(out)

    road = compose([s.road for s in sets])
    risk = compose([s.risk for s in sets])
    poi = compose([s.poi for s in sets])
    adaptive = compose([s.adaptive() for s in sets])
    normalized = [
        compose([s.normalized[0] for s in sets]),
        compose([s.normalized[1] for s in sets]),
        compose([s.normalized[2] for s in sets]),
    ]
    return SupportSet(road=road, risk=risk, poi=poi, adaptive_fixed=adaptive, normalized=normalized)


@dataclass
class GridNodeMap:
    """(W*H) x N projection: row m holds 1/k at each of the k nodes in cell m."""

    matrix: Tensor
    assignments: list  # node index -> cell index

    @property
    def cells(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.matrix.shape[1]


def build_grid_node_map(cells_of_node, w: int, h: int, n: int) -> GridNodeMap:
    """Mean-aggregation map from node embeddings to grid cells.

    ``cells_of_node`` assigns each node to exactly one flat cell index in
    [0, w*h). Rows with assigned nodes sum to 1; empty cells are all-zero.
    """
    cells = list(cells_of_node)
    if len(cells) != n:
        raise GridMapError(f"build_grid_node_map: {len(cells)} assignments for {n} nodes")
    m = np.zeros((w * h, n))
    for node, cell in enumerate(cells):
        cell = int(cell)
        if not (0 <= cell < w * h):
            raise GridMapError(f"build_grid_node_map: node {node} assigned to cell {cell} outside [0, {w * h})")
        m[cell, node] = 1.0
    counts = m.sum(axis=1, keepdims=True)
    np.divide(m, counts, out=m, where=counts > 0)
    return GridNodeMap(matrix=Tensor(m), assignments=[int(c) for c in cells])


def block_grid_node_map(maps: list) -> GridNodeMap:
    """Block-diagonal composition of per-city grid-node maps."""
    rows = sum(m.cells for m in maps)
    cols = sum(m.n for m in maps)
    out = np.zeros((rows, cols))
    r = c = 0
    assignments = []
    for m in maps:
        out[r : r + m.cells, c : c + m.n] = m.matrix.data
        assignments.extend(a + r for a in m.assignments)
        r += m.cells
        c += m.n
    return GridNodeMap(matrix=Tensor(out), assignments=assignments)
