"""Robust shortest paths over interval edge costs.

With nonnegative costs the path LP ``min <c, x> s.t. Bx = b, 0 <= x <= 1`` has
an integral optimum, so it is solved combinatorially: two label-setting
passes (from the source and, reversed, to the target) identify the edges on
some shortest path, and a lexicographic walk over those edges picks the
optimal path with the smallest node sequence.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from .conformal import IntervalSet
from .errors import ConfigError, NoPathError, ValidationError
from .graph import EdgeSplit, Graph

#: Relative tolerance when deciding whether an edge lies on a shortest path.
TIE_RTOL = 1e-12


class Risk(str, enum.Enum):
    UPPER_BOUND = "upper-bound"
    VAR = "var"


@dataclass(frozen=True, eq=False)
class CostVector:
    """Worst-case cost per edge of the whole graph."""

    costs: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        c = np.array(self.costs, dtype=float).reshape(-1)
        if not np.all(np.isfinite(c)):
            raise ValidationError("cost vector has non-finite entries")
        if np.any(c < 0):
            raise ValidationError("cost vector has negative entries")
        c.flags.writeable = False
        object.__setattr__(self, "costs", c)

    def __len__(self):
        return int(self.costs.size)


def cost_vector(intervals: IntervalSet, risk=Risk.UPPER_BOUND, alpha: float | None = None,
                n_edges: int | None = None, known=None) -> CostVector:
    """Upper interval endpoints clamped at zero, as a full-graph cost vector.

    ``known`` maps edge index to a revealed weight and covers every edge the
    interval set does not; ``n_edges`` defaults to ``max(edge) + 1``.  For
    ``Risk.VAR`` the intervals must have been produced at miscoverage
    ``alpha`` (their upper endpoint is then the value-at-risk).
    """
    risk = Risk(risk)
    if risk is Risk.VAR:
        if alpha is None or intervals.alpha is None or not math.isclose(alpha, intervals.alpha):
            raise ConfigError(
                f"VaR at alpha={alpha} needs intervals calibrated at that level (got {intervals.alpha})"
            )
    hi = intervals.hi
    if not np.all(np.isfinite(hi)):
        bad = int(intervals.edges[np.flatnonzero(~np.isfinite(hi))[0]])
        raise ValidationError(
            f"{intervals.method.value} produced an infinite upper bound (edge {bad}); "
            "the calibration set is too small for this alpha"
        )
    known = {} if known is None else known
    if n_edges is None:
        top = [int(intervals.edges.max()) + 1 if len(intervals) else 0]
        top += [max(known) + 1] if known else []
        n_edges = max(top)
    costs = np.full(n_edges, np.nan)
    for e, w in known.items():
        costs[e] = w
    costs[intervals.edges] = hi
    if np.isnan(costs).any():
        missing = int(np.flatnonzero(np.isnan(costs))[0])
        raise ValidationError(f"no cost for edge {missing}")
    label = intervals.method.value if risk is Risk.UPPER_BOUND else f"{intervals.method.value}@VaR({alpha})"
    return CostVector(np.maximum(costs, 0.0), provenance=label)


def known_weights(g: Graph, split: EdgeSplit) -> dict:
    """Revealed weights at decision time: train, val and calibration edges."""
    return {int(e): float(g.weights[e]) for e in split.known}


@dataclass
class RoutePlan:
    source: int
    target: int
    path: list
    nodes: list
    edge_costs: list
    worst_case_cost: float
    method: str = ""
    realized_cost: float | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self, g: Graph | None = None) -> dict:
        label = (lambda i: g.node_ids[i]) if g is not None else (lambda i: i)
        d = {
            "source": label(self.source),
            "target": label(self.target),
            "method": self.method,
            "nodes": [label(n) for n in self.nodes],
            "edges": [
                {"edge": int(e), "src": label(int(g.edges[e][0])) if g is not None else None,
                 "dst": label(int(g.edges[e][1])) if g is not None else None, "cost": c}
                for e, c in zip(self.path, self.edge_costs)
            ],
            "worst_case_cost": self.worst_case_cost,
            "realized_cost": self.realized_cost,
        }
        if g is not None:
            for item in d["edges"]:
                w = g.weights[item["edge"]]
                item["true_weight"] = None if np.isnan(w) else float(w)
        d.update(self.extras)
        return d

    def to_json(self, g: Graph | None = None) -> str:
        return json.dumps(self.to_dict(g), indent=2)


class Router:
    """Reusable shortest-path solver for one graph structure."""

    def __init__(self, g: Graph):
        self.graph = g
        self.n = g.n_nodes
        self.src = g.edges[:, 0]
        self.dst = g.edges[:, 1]
        order = np.lexsort((self.dst, self.src))
        self._order = order
        self._out_start = np.searchsorted(self.src[order], np.arange(self.n + 1))

    def _matrix(self, costs, reverse=False):
        rows, cols = (self.dst, self.src) if reverse else (self.src, self.dst)
        m = sp.csr_matrix((costs, (rows, cols)), shape=(self.n, self.n))
        return m

    def distances(self, costs, source):
        return dijkstra(self._matrix(costs), directed=True, indices=int(source))

    def shortest_path(self, costs: CostVector, s: int, t: int, method: str = "") -> RoutePlan:
        if s == t:
            raise ConfigError("source and target must differ")
        if len(costs) != self.graph.n_edges:
            raise ValidationError(f"{len(costs)} costs for {self.graph.n_edges} edges")
        c = costs.costs
        d_s = dijkstra(self._matrix(c), directed=True, indices=int(s))
        if not np.isfinite(d_s[t]):
            raise NoPathError(f"node {self.graph.node_ids[t]} is unreachable from {self.graph.node_ids[s]}")
        d_t = dijkstra(self._matrix(c, reverse=True), directed=True, indices=int(t))
        total = d_s[t]
        tol = TIE_RTOL * max(1.0, total)
        slack = d_s[self.src] + c + d_t[self.dst] - total
        tight = np.abs(slack) <= tol * 4

        # lexicographic DFS over tight edges; out-edges are pre-sorted by target
        path_nodes, path_edges = [s], []
        on_path = {s}
        dead = set()
        iters = [self._tight_out(s, tight)]
        while iters:
            nxt = next(iters[-1], None)
            if nxt is None:
                iters.pop()
                u = path_nodes.pop()
                dead.add(u)
                on_path.discard(u)
                if path_edges:
                    path_edges.pop()
                continue
            e, v = nxt
            if v in on_path or v in dead:
                continue
            path_nodes.append(v)
            path_edges.append(e)
            on_path.add(v)
            if v == t:
                break
            iters.append(self._tight_out(v, tight))
        if not path_nodes or path_nodes[-1] != t:
            # only reachable through zero-cost cycles in the tight subgraph
            path_nodes, path_edges = self._predecessor_path(c, s, t)
        edge_costs = [float(c[e]) for e in path_edges]
        return RoutePlan(
            source=int(s),
            target=int(t),
            path=[int(e) for e in path_edges],
            nodes=[int(n) for n in path_nodes],
            edge_costs=edge_costs,
            worst_case_cost=float(sum(edge_costs)),
            method=method,
        )

    def _predecessor_path(self, c, s, t):
        _, pred = dijkstra(self._matrix(c), directed=True, indices=int(s), return_predecessors=True)
        nodes = [int(t)]
        while nodes[-1] != s:
            nodes.append(int(pred[nodes[-1]]))
        nodes.reverse()
        index = self.graph.edge_index
        return nodes, [index[a, b] for a, b in zip(nodes, nodes[1:])]

    def _tight_out(self, u, tight):
        for e in self._order[self._out_start[u]:self._out_start[u + 1]]:
            if tight[e]:
                yield int(e), int(self.dst[e])

    def reachable(self, s: int) -> np.ndarray:
        d = dijkstra(self._matrix(np.ones(self.graph.n_edges)), directed=True, indices=int(s), unweighted=True)
        return np.isfinite(d)


def shortest_path(g: Graph, costs: CostVector, s: int, t: int, method: str = "") -> RoutePlan:
    """Minimum-cost ``s -> t`` path; ties go to the smallest node sequence."""
    return Router(g).shortest_path(costs, s, t, method)


def incidence_matrix(g: Graph) -> np.ndarray:
    """Node-arc incidence: +1 at each edge's source row, -1 at its target row."""
    b = np.zeros((g.n_nodes, g.n_edges))
    cols = np.arange(g.n_edges)
    b[g.edges[:, 0], cols] = 1.0
    b[g.edges[:, 1], cols] = -1.0
    return b


def path_indicator(g: Graph, plan: RoutePlan) -> np.ndarray:
    x = np.zeros(g.n_edges)
    x[plan.path] = 1.0
    return x


def realized_cost(plan: RoutePlan, weights) -> float:
    """Sum of true weights along the plan's edges."""
    w = np.asarray(weights, dtype=float)
    vals = w[plan.path]
    if np.isnan(vals).any():
        missing = plan.path[int(np.flatnonzero(np.isnan(vals))[0])]
        raise ValidationError(f"true weight of edge {missing} is unknown")
    return float(vals.sum())
