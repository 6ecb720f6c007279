"""Edge rewiring and feature mutation applied as pure dataset transforms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import CsrGraph

MAX_REDRAWS = 100


@dataclass(frozen=True)
class PerturbSpec:
    kind: str
    p: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("edge_rewire", "feature_noise"):
            raise ValueError(f"perturbation kind must be edge_rewire or feature_noise, got {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"perturbation probability must be in [0, 1], got {self.p}")


@dataclass
class RewireReport:
    graph: CsrGraph
    removed: int
    inserted: int
    skipped: int
    survivors: np.ndarray  # mask over the original g.edges() rows that were not cut


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def rewire_edges_report(g: CsrGraph, p: float, rng) -> RewireReport:
    """Cut each undirected edge with probability p; each cut inserts one random edge.

    Edges are visited in sorted order. A cut edge is removed first, then a new
    edge between two uniformly drawn distinct nodes is added; draws hitting a
    self-loop or a present edge are redrawn up to ``MAX_REDRAWS`` times, after
    which the insertion is skipped.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    rng = _rng(rng)
    edges = g.edges()
    cut = rng.random(len(edges)) < p
    if not cut.any():
        return RewireReport(g, 0, 0, 0, np.ones(len(edges), dtype=bool))
    n = g.num_nodes
    present = {(int(u), int(v)) for u, v in edges}
    inserted = skipped = 0
    for u, v in edges[cut]:
        present.discard((int(u), int(v)))
        for _ in range(MAX_REDRAWS):
            a, b = (int(x) for x in rng.integers(0, n, size=2))
            if a == b:
                continue
            key = (a, b) if a < b else (b, a)
            if key not in present:
                present.add(key)
                inserted += 1
                break
        else:
            skipped += 1
    new = CsrGraph.from_edges(n, sorted(present)) if present else CsrGraph.from_edges(n, [])
    return RewireReport(new, int(cut.sum()), inserted, skipped, ~cut)


def rewire_edges(g: CsrGraph, p: float, rng) -> CsrGraph:
    return rewire_edges_report(g, p, rng).graph


def mutate_features(x: np.ndarray, p: float, rng) -> np.ndarray:
    """Replace each node's whole feature row with N(0, 1) draws, independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    rng = _rng(rng)
    x = np.asarray(x, dtype=np.float64)
    hit = rng.random(x.shape[0]) < p
    out = x.copy()
    out[hit] = rng.standard_normal((int(hit.sum()), x.shape[1]))
    return out

