import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_routing.conformal import IntervalSet, Method
from conformal_routing.errors import ConfigError, NoPathError, ValidationError
from conformal_routing.planner import (
    CostVector,
    Risk,
    Router,
    cost_vector,
    incidence_matrix,
    path_indicator,
    realized_cost,
    shortest_path,
)

from conftest import enumerate_paths, lp_path_cost, make_graph, random_cost_graph


def costs_of(values):
    return CostVector(np.asarray(values, dtype=float))


def check_path(g, plan):
    nodes = plan.nodes
    assert nodes[0] == plan.source and nodes[-1] == plan.target
    assert len(set(nodes)) == len(nodes)
    for e, (a, b) in zip(plan.path, zip(nodes, nodes[1:])):
        assert tuple(g.edges[e]) == (a, b)


class TestCostVector:
    def test_upper_bound(self):
        iv = IntervalSet(Method.CQR, [0], [-0.3], [4.0], alpha=0.05)
        assert cost_vector(iv).costs.tolist() == [4.0]

    def test_clamp(self):
        iv = IntervalSet(Method.CQR, [0], [-2.0], [-0.5], alpha=0.05)
        assert cost_vector(iv).costs.tolist() == [0.0]

    def test_clamp_idempotent(self):
        iv = IntervalSet(Method.CQR, [0, 1, 2], [-3.0, 1.0, -1.0], [-1.0, 2.0, 0.5], alpha=0.05)
        once = cost_vector(iv)
        again = cost_vector(IntervalSet(Method.CQR, [0, 1, 2], np.minimum(iv.lo, once.costs), once.costs))
        assert np.array_equal(once.costs, again.costs)

    def test_var_uses_hi_at_matching_alpha(self):
        iv = IntervalSet(Method.CQR, [0, 1], [0.0, 1.0], [3.0, 2.0], alpha=0.1)
        assert cost_vector(iv, Risk.VAR, alpha=0.1).costs.tolist() == [3.0, 2.0]
        with pytest.raises(ConfigError):
            cost_vector(iv, Risk.VAR, alpha=0.05)

    def test_infinite_upper_bound(self):
        iv = IntervalSet(Method.CQR, [0], [-math.inf], [math.inf], alpha=0.05, q=math.inf)
        with pytest.raises(ValidationError, match="calibration"):
            cost_vector(iv)

    def test_known_fills_gaps(self):
        iv = IntervalSet(Method.QR, [1], [0.0], [2.0])
        assert cost_vector(iv, n_edges=3, known={0: 5.0, 2: 1.0}).costs.tolist() == [5.0, 2.0, 1.0]
        with pytest.raises(ValidationError):
            cost_vector(iv, n_edges=3, known={0: 5.0})

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            costs_of([-1.0])


class TestShortestPath:
    def test_single_edge(self):
        g = make_graph([(0, 1)])
        plan = shortest_path(g, costs_of([3.0]), 0, 1)
        assert plan.path == [0] and plan.worst_case_cost == 3.0

    def test_diamond(self):
        # s=0, a=1, b=2, t=3
        g = make_graph([(0, 1), (1, 3), (0, 2), (2, 3)])
        plan = shortest_path(g, costs_of([1, 1, 1, 2]), 0, 3)
        assert plan.nodes == [0, 1, 3] and plan.worst_case_cost == 2.0

    def test_tie_break_lexicographic(self):
        g = make_graph([(0, 2), (2, 3), (0, 1), (1, 3)])
        plan = shortest_path(g, costs_of([1, 1, 1, 1]), 0, 3)
        assert plan.nodes == [0, 1, 3]

    def test_zero_cost_cycle(self):
        g = make_graph([(0, 1), (1, 0), (1, 2), (0, 2)])
        plan = shortest_path(g, costs_of([0, 0, 0, 5]), 0, 2)
        assert plan.nodes == [0, 1, 2]

    def test_unreachable(self):
        g = make_graph([(0, 1), (2, 1)])
        with pytest.raises(NoPathError):
            shortest_path(g, costs_of([1, 1]), 0, 2)

    def test_same_endpoints(self):
        with pytest.raises(ConfigError):
            shortest_path(make_graph([(0, 1)]), costs_of([1]), 0, 0)

    def test_wrong_length(self):
        with pytest.raises(ValidationError):
            shortest_path(make_graph([(0, 1)]), costs_of([1, 2]), 0, 1)

    @pytest.mark.parametrize("seed", range(20))
    def test_random_dags(self, seed):
        rng = np.random.default_rng(seed)
        n = 8
        edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < 0.5] + [(0, n - 1)]
        edges = sorted(set(edges))
        g = make_graph(edges, n_nodes=n)
        c = rng.uniform(0, 5, len(edges))
        plan = shortest_path(g, costs_of(c), 0, n - 1)
        best = min(sum(c[e] for e in p) for _, p in enumerate_paths(g, 0, n - 1))
        assert plan.worst_case_cost == pytest.approx(best, abs=1e-9)

    @pytest.mark.parametrize("seed", range(250))
    def test_oracle_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        g, c = random_cost_graph(rng)
        s, t = (int(x) for x in rng.choice(g.n_nodes, size=2, replace=False))
        paths = enumerate_paths(g, s, t)
        lp = lp_path_cost(g, c, s, t)
        if not paths:
            assert lp is None
            with pytest.raises(NoPathError):
                shortest_path(g, costs_of(c), s, t)
            return
        plan = shortest_path(g, costs_of(c), s, t)
        check_path(g, plan)
        values = [sum(c[e] for e in p) for _, p in paths]
        best = min(values)
        assert abs(plan.worst_case_cost - best) <= 1e-9
        assert abs(plan.worst_case_cost - lp) <= 1e-9
        # among optimal paths the lexicographically smallest node sequence wins
        optimal = sorted(nodes for (nodes, _), v in zip(paths, values) if v <= best + 1e-12 * max(1, best))
        assert plan.nodes == optimal[0]


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 100_000), st.floats(0.0, 10.0))
    def test_monotonicity(self, seed, bump):
        rng = np.random.default_rng(seed)
        g, c = random_cost_graph(rng)
        s, t = (int(x) for x in rng.choice(g.n_nodes, size=2, replace=False))
        router = Router(g)
        try:
            plan = router.shortest_path(costs_of(c), s, t)
        except NoPathError:
            return
        off = [e for e in range(g.n_edges) if e not in plan.path]
        if off:
            c2 = c.copy()
            c2[off[int(rng.integers(len(off)))]] += bump
            assert router.shortest_path(costs_of(c2), s, t).path == plan.path
        c3 = c.copy()
        c3[plan.path[int(rng.integers(len(plan.path)))]] += bump
        assert router.shortest_path(costs_of(c3), s, t).worst_case_cost >= plan.worst_case_cost - 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_oracle_lower_bound(self, seed):
        rng = np.random.default_rng(seed)
        g, truth = random_cost_graph(rng)
        s, t = (int(x) for x in rng.choice(g.n_nodes, size=2, replace=False))
        try:
            oracle = shortest_path(g, costs_of(truth), s, t)
        except NoPathError:
            return
        assert realized_cost(oracle, truth) == pytest.approx(oracle.worst_case_cost)
        noisy = shortest_path(g, costs_of(truth * rng.uniform(0.5, 2.0, truth.size)), s, t)
        assert realized_cost(noisy, truth) >= realized_cost(oracle, truth) - 1e-12


class TestIncidence:
    def test_single_edge(self):
        assert incidence_matrix(make_graph([(0, 1)])).tolist() == [[1.0], [-1.0]]

    def test_column_sums(self):
        g, _ = random_cost_graph(np.random.default_rng(0))
        assert not incidence_matrix(g).sum(axis=0).any()

    def test_flow_conservation(self):
        g = make_graph([(0, 1), (1, 2), (2, 3), (0, 3), (3, 1)])
        plan = shortest_path(g, costs_of([1, 1, 1, 5, 1]), 0, 3)
        b = incidence_matrix(g) @ path_indicator(g, plan)
        assert b.tolist() == [1.0, 0.0, 0.0, -1.0]


class TestRealizedCost:
    def test_sum(self):
        g = make_graph([(0, 1), (1, 2)])
        plan = shortest_path(g, costs_of([1, 1]), 0, 2)
        assert realized_cost(plan, [2.0, 3.0]) == 5.0

    def test_missing_weight(self):
        g = make_graph([(0, 1), (1, 2)])
        plan = shortest_path(g, costs_of([1, 1]), 0, 2)
        with pytest.raises(ValidationError):
            realized_cost(plan, [2.0, np.nan])

    def test_json(self):
        g = make_graph([(0, 1), (1, 2)], [2.0, 3.0])
        plan = shortest_path(g, costs_of([1, 4]), 0, 2, "CQR")
        plan.realized_cost = realized_cost(plan, g.weights)
        d = plan.to_dict(g)
        assert d["nodes"] == [0, 1, 2] and d["worst_case_cost"] == 5.0 and d["realized_cost"] == 5.0
        assert [e["true_weight"] for e in d["edges"]] == [2.0, 3.0]
