"""Random walk with restart on weighted user-item graphs.

Node layout of a :class:`BipartiteGraph`: users first, then items, then any
attribute nodes added by :func:`augment_graph`. Scores are computed by power
iteration; many query nodes are handled at once by iterating a block of
score columns together.

Dangling nodes (zero weighted degree) would leak probability mass out of the
walk. Their mass is sent to the restart target instead: the query node for
score vectors and the popularity vector for the bias vector. With that
redirection every transition operator is column stochastic and all score
vectors sum to one.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .dataset import ImplicitDataset, RatingDataset, SideInfo, natural_key
from .errors import ConfigurationError, DomainError, NonConvergenceError, ReferentialError

EPS = 1e-9
MAX_ITER = 1000


class NodeKind(enum.IntEnum):
    USER = 0
    ITEM = 1
    ATTRIBUTE = 2


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Symmetric weighted adjacency plus node labels.

    Labels are ``"u:<id>"``, ``"i:<id>"`` and ``"a:<attribute id>"``.
    ``n_rating_edges`` counts the user-item edges, which come first in the
    edge list and are the only ones that carry rating semantics.
    """

    nodes: tuple[str, ...]
    kind: np.ndarray
    adjacency: sp.csr_matrix
    n_users: int
    n_items: int
    rating_edges: tuple[np.ndarray, np.ndarray, np.ndarray]

    @property
    def n_nodes(self):
        return len(self.nodes)

    def item_nodes(self) -> np.ndarray:
        return np.arange(self.n_users, self.n_users + self.n_items)

    def user_node(self, k: int) -> int:
        return k

    def item_node(self, k: int) -> int:
        return self.n_users + k

    def node_index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise ReferentialError(f"unknown node {label!r}") from None

    @property
    def _index(self):
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {n: k for k, n in enumerate(self.nodes)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def degree(self, node: int) -> int:
        return int(self.adjacency.indptr[node + 1] - self.adjacency.indptr[node])

    def n_edges(self) -> int:
        """Undirected edge count."""
        a = self.adjacency
        loops = int(np.count_nonzero(a.diagonal()))
        return (a.nnz - loops) // 2 + loops


def _symmetric(n, rows, cols, weights):
    a = sp.coo_matrix((np.concatenate([weights, weights]),
                       (np.concatenate([rows, cols]), np.concatenate([cols, rows]))), shape=(n, n))
    return a.tocsr()


def build_graph(train: RatingDataset | ImplicitDataset) -> BipartiteGraph:
    """Ratings (explicit) or confidences (implicit) become edge weights."""
    if isinstance(train, ImplicitDataset):
        base, weights = train.base, np.asarray(train.confidence, dtype=np.float64)
    else:
        base, weights = train, np.asarray(train.values, dtype=np.float64)
    if len(base) == 0:
        raise ConfigurationError("cannot build a graph from an empty dataset")
    if np.any(weights <= 0):
        raise DomainError("edge weights must be positive")
    nu, ni = base.n_users, base.n_items
    nodes = tuple(f"u:{u}" for u in base.users) + tuple(f"i:{i}" for i in base.items)
    kind = np.concatenate([np.full(nu, NodeKind.USER), np.full(ni, NodeKind.ITEM)]).astype(np.int8)
    rows = base.user_idx
    cols = base.item_idx + nu
    adj = _symmetric(nu + ni, rows, cols, weights)
    return BipartiteGraph(nodes, kind, adj, nu, ni, (rows.copy(), cols.copy(), weights.copy()))


def augment_graph(g: BipartiteGraph, side: SideInfo, delta: float) -> BipartiteGraph:
    """Add one node per attribute value and ``delta``-weighted side edges.

    User and item attributes link their entity to the attribute node; social
    links become user-user edges (undirected, self-loops dropped).
    """
    if not delta > 0:
        raise ConfigurationError(f"delta must be positive, got {delta}")
    if side is None or side.is_empty():
        return g
    upos = {n[2:]: k for k, n in enumerate(g.nodes[:g.n_users])}
    ipos = {n[2:]: g.n_users + k for k, n in enumerate(g.nodes[g.n_users:g.n_users + g.n_items])}
    attrs = sorted({s for _, s, _ in side.user_attributes} | {t for t, _, _ in side.item_attributes},
                   key=natural_key)
    existing = [n[2:] for n in g.nodes[g.n_users + g.n_items:]]
    known = set(existing)
    new_attrs = [a for a in attrs if a not in known]
    all_attrs = existing + new_attrs
    n_old = g.n_nodes
    apos = {a: g.n_users + g.n_items + k for k, a in enumerate(all_attrs)}
    rows, cols = [], []
    try:
        for u, s, _ in side.user_attributes:
            rows.append(upos[u])
            cols.append(apos[s])
        for t, i, _ in side.item_attributes:
            rows.append(ipos[i])
            cols.append(apos[t])
        for a, b in side.undirected_links():
            rows.append(upos[a])
            cols.append(upos[b])
    except KeyError as exc:
        raise ReferentialError(f"side information references unknown id {exc.args[0]!r}") from None
    n = n_old + len(new_attrs)
    # collapse repeated side records into a single delta edge
    pairs = np.unique(np.stack([np.minimum(rows, cols), np.maximum(rows, cols)], axis=1), axis=0) \
        if rows else np.zeros((0, 2), dtype=np.int64)
    extra = _symmetric(n, pairs[:, 0], pairs[:, 1], np.full(len(pairs), float(delta)))
    old = g.adjacency.tocoo()
    base = sp.coo_matrix((old.data, (old.row, old.col)), shape=(n, n)).tocsr()
    adj = (base + extra).tocsr()
    nodes = g.nodes + tuple(f"a:{a}" for a in new_attrs)
    kind = np.concatenate([g.kind, np.full(len(new_attrs), NodeKind.ATTRIBUTE, dtype=np.int8)])
    return BipartiteGraph(nodes, kind, adj, g.n_users, g.n_items, g.rating_edges)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """Row-normalized adjacency D^-1 A; ``transition`` holds its transpose."""

    matrix: sp.csr_matrix
    transition: sp.csr_matrix
    dangling: np.ndarray
    graph: BipartiteGraph | None = None

    @property
    def n_nodes(self):
        return self.matrix.shape[0]

    def dangling_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.dangling)


def row_normalize(g: BipartiteGraph | sp.spmatrix) -> NormalizedAdjacency:
    a = g.adjacency if isinstance(g, BipartiteGraph) else sp.csr_matrix(g)
    deg = np.asarray(a.sum(axis=1)).ravel()
    dangling = deg == 0
    inv = np.zeros_like(deg)
    inv[~dangling] = 1.0 / deg[~dangling]
    m = sp.diags(inv) @ a
    m = sp.csr_matrix(m)
    return NormalizedAdjacency(m, sp.csr_matrix(m.T), dangling,
                               g if isinstance(g, BipartiteGraph) else None)


@dataclass(frozen=True, eq=False)
class RwrScoreVector:
    scores: np.ndarray
    query: int
    iterations: int
    residual: float


@dataclass(frozen=True, eq=False)
class BiasVector:
    b: np.ndarray
    m_tilde: np.ndarray
    iterations: int = 0
    residual: float = 0.0


def _as_node(adj: NormalizedAdjacency, query) -> int:
    if isinstance(query, str):
        if adj.graph is None:
            raise ReferentialError("string queries need a graph-backed adjacency")
        return adj.graph.node_index(query)
    q = int(query)
    if not 0 <= q < adj.n_nodes:
        raise ReferentialError(f"node {q} out of range")
    return q


def _iterate(adj, walk, jump, redirect, start, eps, max_iter):
    """Power iteration of r <- walk * (P r + redirect * dangling.r) + jump.

    ``redirect``/``jump``/``start`` are (n, m) blocks, one column per query.
    Returns the converged block, iteration count and per-column residuals.
    """
    pt = adj.transition
    dmask = adj.dangling
    has_dangling = bool(dmask.any())
    r = start
    residual = np.full(r.shape[1], np.inf)
    for it in range(1, max_iter + 1):
        nxt = pt @ r
        if has_dangling:
            nxt += redirect * r[dmask].sum(axis=0)
        nxt *= walk
        nxt += jump
        residual = np.abs(nxt - r).sum(axis=0)
        r = nxt
        if np.all(residual < eps):
            return r, it, residual
    raise NonConvergenceError(max_iter, float(residual.max()))


def _unit_block(n, queries):
    q = np.zeros((n, len(queries)))
    q[queries, np.arange(len(queries))] = 1.0
    return q


def rwr_scores_many(adj: NormalizedAdjacency, queries: Sequence[int], c: float,
                    eps: float = EPS, max_iter: int = MAX_ITER) -> tuple[np.ndarray, int, np.ndarray]:
    """Block version of :func:`rwr_scores`; column j belongs to ``queries[j]``."""
    if not 0 < c < 1:
        raise ConfigurationError(f"restart probability must lie in (0, 1), got {c}")
    n = adj.n_nodes
    q = _unit_block(n, [_as_node(adj, x) for x in queries])
    start = np.full_like(q, 1.0 / n)
    return _iterate(adj, 1.0 - c, c * q, q, start, eps, max_iter)


def rwr_scores(adj: NormalizedAdjacency, query, c: float, eps: float = EPS,
               max_iter: int = MAX_ITER) -> RwrScoreVector:
    """Fixed point of r = (1 - c) A~^T r + c q, starting from the uniform vector."""
    node = _as_node(adj, query)
    r, it, res = rwr_scores_many(adj, [node], c, eps, max_iter)
    return RwrScoreVector(r[:, 0], node, it, float(res[0]))


def global_mean_vector(g: BipartiteGraph) -> np.ndarray:
    """Normalized per-entity mean rating (given by users, received by items).

    Only user-item edges count; attribute nodes get zero.
    """
    rows, cols, w = g.rating_edges
    if len(w) == 0:
        raise DomainError("graph has no rating edges")
    n = g.n_nodes
    total = np.bincount(rows, weights=w, minlength=n) + np.bincount(cols, weights=w, minlength=n)
    count = np.bincount(rows, minlength=n) + np.bincount(cols, minlength=n)
    m = np.zeros(n)
    seen = count > 0
    m[seen] = total[seen] / count[seen]
    s = m.sum()
    if not s > 0:
        raise DomainError("all entity means are zero")
    return m / s


def bias_vector(adj: NormalizedAdjacency, m_tilde: np.ndarray, c: float, eps: float = EPS,
                max_iter: int = MAX_ITER) -> BiasVector:
    """Fixed point of b = (1 - c) A~^T b + c m~, starting from m~."""
    if not 0 < c < 1:
        raise ConfigurationError(f"restart probability must lie in (0, 1), got {c}")
    m = np.asarray(m_tilde, dtype=np.float64).reshape(-1, 1)
    if m.shape[0] != adj.n_nodes:
        raise ConfigurationError("m_tilde length differs from the node count")
    if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-10:
        raise ConfigurationError("m_tilde must be a probability vector")
    b, it, res = _iterate(adj, 1.0 - c, c * m, m, m.copy(), eps, max_iter)
    return BiasVector(b[:, 0], m[:, 0], it, float(res[0]))


def _check_mix(beta, gamma):
    if beta < 0 or gamma < 0:
        raise ConfigurationError("beta and gamma must be non-negative")
    if beta + gamma > 1 + 1e-12:
        raise ConfigurationError(f"beta + gamma = {beta + gamma} exceeds 1")


def rwr_bias_scores_many(adj: NormalizedAdjacency, queries: Sequence[int], beta: float, gamma: float,
                         b: BiasVector, eps: float = EPS, max_iter: int = MAX_ITER):
    _check_mix(beta, gamma)
    n = adj.n_nodes
    q = _unit_block(n, [_as_node(adj, x) for x in queries])
    jump = gamma * q + (1.0 - beta - gamma) * b.b[:, None]
    start = np.full_like(q, 1.0 / n)
    return _iterate(adj, beta, jump, q, start, eps, max_iter)


def rwr_bias_scores(adj: NormalizedAdjacency, query, beta: float, gamma: float, b: BiasVector,
                    eps: float = EPS, max_iter: int = MAX_ITER) -> RwrScoreVector:
    """Fixed point of r = beta A~^T r + gamma q + (1 - beta - gamma) b."""
    node = _as_node(adj, query)
    r, it, res = rwr_bias_scores_many(adj, [node], beta, gamma, b, eps, max_iter)
    return RwrScoreVector(r[:, 0], node, it, float(res[0]))


def rank_items(scores, candidates: Iterable[int]) -> list[int]:
    """Candidates by descending score, ties by ascending id (node order)."""
    s = scores.scores if isinstance(scores, RwrScoreVector) else np.asarray(scores)
    cand = np.asarray(sorted(set(int(c) for c in candidates)), dtype=np.int64)
    if len(cand) == 0:
        return []
    order = np.lexsort((cand, -s[cand]))
    return cand[order].tolist()


def dump_scores(scores: RwrScoreVector | np.ndarray, nodes: Sequence[str], path) -> None:
    """``node_id score`` rows, highest score first."""
    s = scores.scores if isinstance(scores, RwrScoreVector) else np.asarray(scores)
    order = np.lexsort((np.arange(len(s)), -s))
    Path(path).write_text("".join(f"{nodes[k]} {float(s[k])!r}\n" for k in order), encoding="utf-8")
