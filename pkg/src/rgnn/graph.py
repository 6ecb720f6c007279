"""Sparse undirected graphs and the kernels built on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .autodiff import DimensionError, Tensor, record


@dataclass(frozen=True, eq=False)
class CsrGraph:
    """Undirected simple graph in CSR form; neighbor lists sorted ascending."""

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray

    @classmethod
    def from_edges(cls, num_nodes: int, edges) -> "CsrGraph":
        """Build from an edge list; symmetrizes, drops self-loops and duplicates."""
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            raise IndexError(f"edge endpoint out of range for {num_nodes} nodes")
        e = e[e[:, 0] != e[:, 1]]
        both = np.concatenate([e, e[:, ::-1]], axis=0)
        if both.size:
            both = np.unique(both, axis=0)  # lexicographic: sorted by row then column
        counts = np.bincount(both[:, 0], minlength=num_nodes) if both.size else np.zeros(num_nodes, np.int64)
        offsets = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return cls(int(num_nodes), offsets, both[:, 1].astype(np.int64).copy())

    def neighbors(self, node: int) -> np.ndarray:
        if not 0 <= node < self.num_nodes:
            raise IndexError(f"node {node} out of range for {self.num_nodes} nodes")
        return self.col_indices[self.row_offsets[node]:self.row_offsets[node + 1]]

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.col_indices) // 2

    @cached_property
    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_nodes), self.degrees)

    def edges(self) -> np.ndarray:
        """Undirected edges as (u, v) rows with u < v, sorted."""
        rows = self.row_ids
        keep = rows < self.col_indices
        return np.stack([rows[keep], self.col_indices[keep]], axis=1)

    def subgraph(self, nodes) -> "CsrGraph":
        """Induced subgraph; node ``nodes[k]`` becomes node ``k``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        local = np.full(self.num_nodes, -1, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        e = self.edges()
        e = local[e]
        e = e[(e >= 0).all(axis=1)]
        return CsrGraph.from_edges(len(nodes), e)

    def validate(self) -> None:
        off, col = self.row_offsets, self.col_indices
        if len(off) != self.num_nodes + 1 or off[0] != 0 or off[-1] != len(col):
            raise ValueError("row_offsets inconsistent with col_indices")
        if np.any(np.diff(off) < 0):
            raise ValueError("row_offsets must be nondecreasing")
        if col.size and (col.min() < 0 or col.max() >= self.num_nodes):
            raise ValueError("column index out of range")
        rows = self.row_ids
        if np.any(rows == col):
            raise ValueError("self-loop stored in graph")
        for i in range(self.num_nodes):
            seg = col[off[i]:off[i + 1]]
            if np.any(np.diff(seg) <= 0):
                raise ValueError(f"row {i} is not strictly ascending")
        fwd = set(zip(rows.tolist(), col.tolist()))
        if any((v, u) not in fwd for u, v in fwd):
            raise ValueError("graph is not symmetric")

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        a[self.row_ids, self.col_indices] = 1.0
        return a


def degree(g: CsrGraph, node: int) -> int:
    """Neighbor count, excluding any self-loop."""
    return len(g.neighbors(node))


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Weighted CSR matrix, possibly rectangular.

    Used for the normalized adjacency (square, symmetric) and for the per-level
    sampled adjacency of a batch hierarchy (targets x sources). Aggregation
    patterns built here always contain the (i, i) entry for every row.
    """

    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.shape[0]

    @property
    def nnz(self) -> int:
        return len(self.indices)

    @cached_property
    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))

    @cached_property
    def scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weights, self.indices, self.indptr), shape=self.shape)

    @cached_property
    def scipy_t(self) -> sp.csr_matrix:
        return self.scipy.T.tocsr()

    def to_dense(self) -> np.ndarray:
        return self.scipy.toarray()


NormalizedAdjacency = SparseMatrix


def _with_self_loops(g: CsrGraph) -> tuple[np.ndarray, np.ndarray]:
    deg = g.degrees
    indptr = np.zeros(g.num_nodes + 1, dtype=np.int64)
    np.cumsum(deg + 1, out=indptr[1:])
    rows = np.concatenate([g.row_ids, np.arange(g.num_nodes)])
    cols = np.concatenate([g.col_indices, np.arange(g.num_nodes)])
    order = np.lexsort((cols, rows))
    return indptr, cols[order]


_norm_cache: dict[int, tuple[CsrGraph, SparseMatrix]] = {}
_pattern_cache: dict[int, tuple[CsrGraph, SparseMatrix]] = {}


def sym_normalize(g: CsrGraph) -> SparseMatrix:
    """D̂^{-1/2}(A+I)D̂^{-1/2} with d̂ = degree + 1."""
    hit = _norm_cache.get(id(g))
    if hit is not None and hit[0] is g:
        return hit[1]
    indptr, cols = _with_self_loops(g)
    dhat = (g.degrees + 1).astype(np.float64)
    rows = np.repeat(np.arange(g.num_nodes), np.diff(indptr))
    w = 1.0 / np.sqrt(dhat[rows] * dhat[cols])
    adj = SparseMatrix((g.num_nodes, g.num_nodes), indptr, cols, w)
    if len(_norm_cache) > 64:
        _norm_cache.clear()
    _norm_cache[id(g)] = (g, adj)
    return adj


def self_loop_pattern(g: CsrGraph) -> SparseMatrix:
    """Unweighted (all-ones) pattern of A + I, used for attention."""
    hit = _pattern_cache.get(id(g))
    if hit is not None and hit[0] is g:
        return hit[1]
    indptr, cols = _with_self_loops(g)
    pat = SparseMatrix((g.num_nodes, g.num_nodes), indptr, cols, np.ones(len(cols)))
    if len(_pattern_cache) > 64:
        _pattern_cache.clear()
    _pattern_cache[id(g)] = (g, pat)
    return pat


# ---------------------------------------------------------------------------
# differentiable sparse kernels


def spmm(adj: SparseMatrix, h: Tensor) -> Tensor:
    """Sparse (fixed weights) times dense; differentiable w.r.t. ``h``."""
    if h.data.ndim != 2 or h.shape[0] != adj.shape[1]:
        raise DimensionError(f"spmm: adjacency {adj.shape} incompatible with features {h.shape}")
    A, At = adj.scipy, adj.scipy_t
    return record("spmm", np.asarray(A @ h.data), (h,), lambda g: (np.asarray(At @ g),))


def spmm_values(pattern: SparseMatrix, values: Tensor, h: Tensor) -> Tensor:
    """out[i] = sum_e values[e] * h[col_e] over the row-i entries of ``pattern``.

    ``values`` has one entry per stored element, shape (nnz, 1); differentiable
    in both ``values`` and ``h``.
    """
    if values.shape != (pattern.nnz, 1):
        raise DimensionError(f"spmm_values: expected values of shape {(pattern.nnz, 1)}, got {values.shape}")
    if h.data.ndim != 2 or h.shape[0] != pattern.shape[1]:
        raise DimensionError(f"spmm_values: pattern {pattern.shape} incompatible with features {h.shape}")
    v = values.data[:, 0]
    H = h.data
    A = sp.csr_matrix((v, pattern.indices, pattern.indptr), shape=pattern.shape)
    rows, cols = pattern.row_ids, pattern.indices

    def back(g):
        dv = np.einsum("ij,ij->i", g[rows], H[cols])[:, None]
        return dv, np.asarray(A.T @ g)

    return record("spmm_values", np.asarray(A @ H), (values, h), back)


def segment_softmax(scores: Tensor, pattern: SparseMatrix) -> Tensor:
    """Softmax of per-entry scores (nnz, 1) within each row of ``pattern``."""
    if scores.shape != (pattern.nnz, 1):
        raise DimensionError(f"segment_softmax: expected {(pattern.nnz, 1)}, got {scores.shape}")
    starts = pattern.indptr[:-1]
    if np.any(np.diff(pattern.indptr) == 0):
        raise DimensionError("segment_softmax: every row needs at least one entry")
    rows = pattern.row_ids
    s = scores.data[:, 0]
    e = np.exp(s - np.maximum.reduceat(s, starts)[rows])
    y = e / np.add.reduceat(e, starts)[rows]

    def back(g):
        gy = g[:, 0] * y
        return ((gy - y * np.add.reduceat(gy, starts)[rows])[:, None],)

    return record("segment_softmax", y[:, None], (scores,), back)


# ---------------------------------------------------------------------------
# sampling


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def sample_neighbors(g: CsrGraph, nodes: Iterable[int], s: int, rng) -> list[np.ndarray]:
    """For each node, min(s, degree) distinct neighbors drawn uniformly.

    A node without neighbors gets ``[node]`` (itself) so aggregation falls back
    to its own state.
    """
    if s < 1:
        raise ValueError(f"sample size must be >= 1, got {s}")
    rng = _rng(rng)
    out = []
    for v in nodes:
        nbrs = g.neighbors(int(v))
        if len(nbrs) == 0:
            out.append(np.array([int(v)], dtype=np.int64))
        elif len(nbrs) <= s:
            out.append(nbrs.copy())
        else:
            out.append(np.sort(rng.choice(nbrs, size=s, replace=False)))
    return out


@dataclass
class BatchHierarchy:
    """Node sets B_0 ⊆ B_1 ⊆ ... ⊆ B_M produced by recursive neighbor sampling.

    ``levels[l+1]`` starts with ``levels[l]`` in the same order, so the first
    ``len(levels[l])`` rows of a level-(l+1) state matrix are the states of
    ``levels[l]``. ``sampled[l][k]`` holds the sampled global neighbor ids of
    ``levels[l][k]``.
    """

    levels: list[np.ndarray]
    sampled: list[list[np.ndarray]]
    degrees: np.ndarray
    _local: list[dict[int, int]] = field(default_factory=list, repr=False)

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def local_index(self, level: int) -> dict[int, int]:
        while len(self._local) < len(self.levels):
            lv = self.levels[len(self._local)]
            self._local.append({int(v): k for k, v in enumerate(lv)})
        return self._local[level]

    def pattern(self, level: int, normalized: bool) -> SparseMatrix:
        """Sampled adjacency from ``levels[level]`` (rows) into ``levels[level+1]`` (columns).

        Each row holds the node itself plus its sampled neighbors. With
        ``normalized`` the weights follow the GCN rule with full-graph
        degrees, neighbor terms rescaled by degree / samples; with exhaustive
        sampling this reproduces the rows of the full normalized adjacency.
        """
        targets, nxt = self.levels[level], self.local_index(level + 1)
        dhat = self.degrees.astype(np.float64) + 1.0
        indptr = [0]
        indices: list[int] = []
        weights: list[float] = []
        for k, (v, nbrs) in enumerate(zip(targets, self.sampled[level])):
            v = int(v)
            others = [int(u) for u in nbrs if int(u) != v]
            scale = self.degrees[v] / len(others) if others else 0.0
            entries = [(nxt[v], 1.0 / dhat[v])]
            entries += [(nxt[u], scale / np.sqrt(dhat[v] * dhat[u])) for u in others]
            entries.sort()
            indices.extend(c for c, _ in entries)
            weights.extend(w for _, w in entries)
            indptr.append(len(indices))
        w = np.asarray(weights) if normalized else np.ones(len(indices))
        return SparseMatrix((len(targets), len(self.levels[level + 1])),
                            np.asarray(indptr, dtype=np.int64), np.asarray(indices, dtype=np.int64), w)


def build_batch_hierarchy(g: CsrGraph, batch: Sequence[int], sizes: Sequence[int], rng) -> BatchHierarchy:
    """Expand B_0 = ``batch`` to B_1..B_M, sampling ``sizes[l]`` neighbors of each node in B_l."""
    rng = _rng(rng)
    b0 = list(dict.fromkeys(int(v) for v in batch))
    if not b0:
        raise ValueError("batch must not be empty")
    for v in b0:
        if not 0 <= v < g.num_nodes:
            raise IndexError(f"batch node {v} out of range")
    levels = [np.asarray(b0, dtype=np.int64)]
    sampled = []
    for s in sizes:
        cur = levels[-1]
        nb = sample_neighbors(g, cur, int(s), rng)
        present = set(cur.tolist())
        new = sorted({int(u) for arr in nb for u in arr} - present)
        levels.append(np.concatenate([cur, np.asarray(new, dtype=np.int64)]))
        sampled.append(nb)
    return BatchHierarchy(levels, sampled, g.degrees)


@dataclass
class WalkPairs:
    sources: np.ndarray
    contexts: np.ndarray

    def __len__(self) -> int:
        return len(self.sources)

    def as_list(self) -> list[tuple[int, int]]:
        return list(zip(self.sources.tolist(), self.contexts.tolist()))


def random_walks(g: CsrGraph, starts: Sequence[int], length: int, rng) -> WalkPairs:
    """One uniform random walk of ``length`` steps per start.

    Pairs are (start, node) for every node visited after the start, repeats
    included. A walk stops early at a node without neighbors.
    """
    if length < 1:
        raise ValueError(f"walk length must be >= 1, got {length}")
    rng = _rng(rng)
    starts = np.asarray(starts, dtype=np.int64)
    deg = g.degrees
    walker = np.arange(len(starts))
    cur = starts.copy()
    walker_out, step_out, ctx_out = [], [], []
    for step in range(length):
        alive = deg[cur] > 0
        walker, cur = walker[alive], cur[alive]
        if cur.size == 0:
            break
        pick = (rng.random(cur.size) * deg[cur]).astype(np.int64)
        cur = g.col_indices[g.row_offsets[cur] + pick]
        walker_out.append(walker)
        step_out.append(np.full(cur.size, step))
        ctx_out.append(cur)
    if not ctx_out:
        return WalkPairs(np.zeros(0, np.int64), np.zeros(0, np.int64))
    walker, step, ctx = (np.concatenate(a) for a in (walker_out, step_out, ctx_out))
    order = np.lexsort((step, walker))
    return WalkPairs(starts[walker[order]], ctx[order])
