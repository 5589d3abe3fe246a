"""Message-passing structure derived from circuit topology."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Circuit, descendants


@dataclass(frozen=True)
class GraphRep:
    """Undirected graph over buses with self-loops and symmetric degree normalization.

    ``edges`` holds pairs ``(u, v)`` with ``u <= v``; ``norm_adj[u, v] = 1/sqrt(deg u * deg v)``
    on every edge, degrees counting the self-loop.
    """

    n: int
    edges: frozenset
    norm_adj: np.ndarray
    augmented: bool
    circuit: Circuit

    def __eq__(self, other):
        return (isinstance(other, GraphRep) and self.n == other.n and self.edges == other.edges
                and self.augmented == other.augmented and np.array_equal(self.norm_adj, other.norm_adj))

    __hash__ = None

    def neighbors(self, u: int) -> set[int]:
        return {b if a == u else a for a, b in self.edges if u in (a, b) and a != b}


def _normalized(n: int, edges: frozenset) -> np.ndarray:
    mask = np.zeros((n, n))
    for u, v in edges:
        mask[u, v] = mask[v, u] = 1.0
    deg = mask.sum(axis=1)
    return mask / np.sqrt(np.outer(deg, deg))


def build_graph(circuit: Circuit) -> GraphRep:
    n = circuit.n_buses
    edges = {(u, u) for u in range(n)}
    for ln in circuit.lines:
        edges.add((min(ln.from_bus, ln.to_bus), max(ln.from_bus, ln.to_bus)))
    edges = frozenset(edges)
    return GraphRep(n, edges, _normalized(n, edges), False, circuit)


def augment_regulator_edges(circuit: Circuit, rep: GraphRep) -> GraphRep:
    """Connect each regulator's child bus to every bus below it."""
    edges = set(rep.edges)
    for k in range(len(circuit.regulators)):
        j = circuit.regulator_bus(k)
        for d in descendants(circuit, j):
            edges.add((min(j, d), max(j, d)))
    edges = frozenset(edges)
    if edges == rep.edges:
        return GraphRep(rep.n, edges, rep.norm_adj.copy(), True, circuit)
    return GraphRep(rep.n, edges, _normalized(rep.n, edges), True, circuit)


def graph_for(circuit: Circuit, augmented: bool = False) -> GraphRep:
    rep = build_graph(circuit)
    return augment_regulator_edges(circuit, rep) if augmented else rep
