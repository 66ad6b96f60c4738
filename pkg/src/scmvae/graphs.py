"""Small directed-graph helpers over adjacency matrices.

Convention everywhere: A[i, j] is the weight of edge i -> j, so column j
collects the incoming edges of node j.
"""

from __future__ import annotations

import numpy as np

from .errors import CyclicGraphError


def support(adjacency: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Boolean edge matrix: |A_ij| > threshold (strict)."""
    a = np.asarray(adjacency)
    return np.abs(a) > threshold


def topological_order(edges: np.ndarray) -> list[int]:
    """Kahn's algorithm on a boolean edge matrix; raises CyclicGraphError."""
    e = np.asarray(edges, dtype=bool).copy()
    n = e.shape[0]
    indeg = e.sum(axis=0)
    ready = sorted(np.flatnonzero(indeg == 0).tolist())
    order: list[int] = []
    while ready:
        v = ready.pop(0)
        order.append(v)
        for u in np.flatnonzero(e[v]):
            e[v, u] = False
            indeg[u] -= 1
            if indeg[u] == 0:
                ready.append(int(u))
        ready.sort()
    if len(order) != n:
        raise CyclicGraphError("graph has a directed cycle")
    return order


def is_acyclic(edges: np.ndarray) -> bool:
    try:
        topological_order(edges)
        return True
    except CyclicGraphError:
        return False
