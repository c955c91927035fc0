"""Synthetic road networks for demos and tests.

Junctions are scattered around a few urban centres; roads come from a
Delaunay triangulation thinned to a spanning tree plus the shortest extra
segments, and every road is two-way.  Edge weights are travel costs that grow
with segment length and with congestion near the centres, with
multiplicative noise that is larger where congestion is high.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import Delaunay

from .graph import Graph


def road_network(n_nodes: int = 546, n_edges: int = 2150, seed: int = 0, mean_weight: float = 4.0) -> Graph:
    """A strongly connected two-way road graph with ``n_edges`` directed edges.

    ``n_edges`` must be even and at least ``2 * (n_nodes - 1)``.
    """
    if n_edges % 2 or n_edges < 2 * (n_nodes - 1):
        raise ValueError("n_edges must be even and at least 2 * (n_nodes - 1)")
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.2, 0.8, size=(3, 2))
    which = rng.integers(0, 3, size=n_nodes)
    urban = rng.random(n_nodes) < 0.6
    pts = np.where(
        urban[:, None],
        centres[which] + rng.normal(scale=0.08, size=(n_nodes, 2)),
        rng.uniform(0, 1, size=(n_nodes, 2)),
    )

    tri = Delaunay(pts)
    pairs = set()
    for simplex in tri.simplices:
        for a in range(3):
            i, j = sorted((int(simplex[a]), int(simplex[(a + 1) % 3])))
            pairs.add((i, j))
    pairs = np.array(sorted(pairs))
    length = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
    n_roads = n_edges // 2
    if n_roads > len(pairs):
        raise ValueError(f"triangulation only has {len(pairs)} segments, {n_roads} requested")

    m = coo_matrix((length, (pairs[:, 0], pairs[:, 1])), shape=(n_nodes, n_nodes))
    tree = minimum_spanning_tree(m).tocoo()
    chosen = {(int(min(i, j)), int(max(i, j))) for i, j in zip(tree.row, tree.col)}
    for k in np.argsort(length, kind="stable"):
        if len(chosen) >= n_roads:
            break
        chosen.add((int(pairs[k, 0]), int(pairs[k, 1])))
    roads = np.array(sorted(chosen))

    def congestion(xy):
        d2 = ((xy[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
        return 1.0 + 2.5 * np.exp(-d2 / 0.02).sum(axis=1)

    edges = np.concatenate([roads, roads[:, ::-1]])
    mid = 0.5 * (pts[edges[:, 0]] + pts[edges[:, 1]])
    seg = np.linalg.norm(pts[edges[:, 0]] - pts[edges[:, 1]], axis=1)
    cong = congestion(mid)
    noise = rng.normal(size=len(edges)) * (0.1 + 0.1 * cong)
    raw = (0.02 + seg) * cong * np.exp(noise)
    weights = raw * (mean_weight / raw.mean())
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return Graph(
        n_nodes=n_nodes,
        node_features=pts,
        edges=edges[order],
        weights=weights[order],
        node_ids=tuple(range(1, n_nodes + 1)),
    )
