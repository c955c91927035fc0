import numpy as np
import pytest

from conformal_routing.graph import Graph, split_edges
from conformal_routing.model import GaeConfig, train
from conformal_routing.synthetic import road_network


def make_graph(edges, weights=None, n_nodes=None, features=None):
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n = int(edges.max()) + 1 if n_nodes is None else n_nodes
    if weights is None:
        weights = np.ones(len(edges))
    if features is None:
        features = np.arange(2 * n, dtype=float).reshape(n, 2)
    return Graph(n_nodes=n, node_features=features, edges=edges, weights=np.asarray(weights, dtype=float),
                 node_ids=tuple(range(n)))


@pytest.fixture(scope="session")
def small_network():
    return road_network(n_nodes=80, n_edges=320, seed=3)


@pytest.fixture(scope="session")
def small_split(small_network):
    return split_edges(small_network, seed=1)


@pytest.fixture(scope="session")
def small_model(small_network, small_split):
    cfg = GaeConfig(seed=0)
    return train(small_network, small_split, cfg)


CHICAGO_ENV = "CONFORMAL_ROUTING_CHICAGO"


def chicago_path():
    """Location of the ChicagoSketch TNTP files, or None when absent."""
    import os
    from pathlib import Path

    candidates = [os.environ.get(CHICAGO_ENV), Path(__file__).resolve().parents[1] / "data" / "chicago-sketch"]
    for c in candidates:
        if c and Path(c).is_dir() and list(Path(c).glob("*_net.tntp")):
            return Path(c)
    return None


def loss_instance(seed, n_nodes=None, corrupt=False):
    """Full three-term training loss on a random graph of at most 10 nodes.

    Redraws until every ReLU input and pinball residual is at least 1e-3 from
    its kink, so central differences are valid.  Returns ``(loss_and_grad,
    params)`` ready for ``grad_check``.
    """
    from conformal_routing.graph import build_masked_weights
    from conformal_routing.model import GaeConfig, _forward, decode, init_params, objective, propagation_matrix

    rng = np.random.default_rng(seed)
    while True:
        n = int(rng.integers(4, 11)) if n_nodes is None else n_nodes
        pairs = [(u, v) for u in range(n) for v in range(n) if u != v]
        pick = rng.choice(len(pairs), size=int(rng.integers(max(n, 6), min(len(pairs), 3 * n) + 1)),
                          replace=False)
        edges = np.array([pairs[i] for i in sorted(pick)])
        g = make_graph(edges, rng.uniform(0.5, 5.0, len(edges)), n_nodes=n, features=rng.normal(size=(n, 3)))
        split = split_edges(g, seed=int(rng.integers(1 << 30)))
        cfg = GaeConfig(hidden_dims=(5, 4), embedding_dim=3, alpha=0.1, seed=int(rng.integers(1 << 30)))
        prop = tuple(op.toarray() for op in propagation_matrix(build_masked_weights(g, split).values, "mean"))
        x = np.hstack([np.ones((n, 1)), g.node_features])
        params = init_params(x.shape[1], cfg, rng)
        tr = np.asarray(split.train)
        e, y = g.edges[tr], g.weights[tr]
        emb, cache = _forward(x, prop, params, cfg.n_layers)
        pre = np.concatenate([np.concatenate([c.ravel(), a.ravel()]) for _, _, c, _, _, a in cache["layers"]])
        resid = np.concatenate([y - 2.0 * decode(*emb[h], e) for h in ("lo", "hi")])
        if np.abs(pre).min() > 1e-3 and np.abs(resid).min() > 1e-3:
            break

    def loss_and_grad(ps):
        parts, grads = objective(ps, x, prop, e, y, cfg.alpha, cfg.n_layers, out_scale=2.0)
        if corrupt:
            grads = dict(grads)
            grads["bs1"] = grads["bs1"] * 1.5 + 0.1
        return parts.total, grads

    return loss_and_grad, params


def exchangeable_coverage(n_calib, alpha, trials=1000, seed=0):
    """Fraction of trials in which a fresh i.i.d. score is <= the conformal quantile."""
    from conformal_routing.conformal import conformal_quantile

    rng = np.random.default_rng((seed, n_calib, int(round(alpha * 1000))))
    hits = 0
    for _ in range(trials):
        draw = rng.normal(size=n_calib + 1)
        hits += draw[-1] <= conformal_quantile(draw[:-1], alpha)
    return hits / trials


def coverage_band(n_calib, alpha, trials=1000):
    """``[1 - alpha, 1 - alpha + 1/(n+1)]`` widened by three binomial std devs."""
    sd = np.sqrt(alpha * (1 - alpha) / trials)
    return 1 - alpha - 3 * sd, 1 - alpha + 1 / (n_calib + 1) + 3 * sd


def random_cost_graph(rng, max_nodes=10):
    """Random digraph with at most ``max_nodes`` nodes and nonnegative costs (ties likely)."""
    n = int(rng.integers(2, max_nodes + 1))
    pairs = [(u, v) for u in range(n) for v in range(n) if u != v]
    m = int(rng.integers(1, min(len(pairs), 3 * n) + 1))
    edges = [pairs[i] for i in sorted(rng.choice(len(pairs), size=m, replace=False))]
    if rng.random() < 0.5:
        costs = rng.integers(0, 5, size=m).astype(float)
    else:
        costs = rng.uniform(0, 10, size=m)
    return make_graph(edges, costs, n_nodes=n), costs


def enumerate_paths(g, s, t):
    """All simple s -> t paths as lists of edge indices."""
    out_edges = {}
    for e, (u, v) in enumerate(g.edges):
        out_edges.setdefault(int(u), []).append((e, int(v)))
    paths, stack = [], [(s, [s], [])]
    while stack:
        u, nodes, edges = stack.pop()
        if u == t:
            paths.append((nodes, edges))
            continue
        for e, v in out_edges.get(u, []):
            if v not in nodes:
                stack.append((v, nodes + [v], edges + [e]))
    return paths


def lp_path_cost(g, costs, s, t):
    """Optimal value of min <c, x> s.t. Bx = b, 0 <= x <= 1, or None if infeasible."""
    from scipy.optimize import linprog

    from conformal_routing.planner import incidence_matrix

    b = np.zeros(g.n_nodes)
    b[s], b[t] = 1.0, -1.0
    res = linprog(costs, A_eq=incidence_matrix(g), b_eq=b, bounds=(0, 1), method="highs")
    return res.fun if res.status == 0 else None


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(capsys):
    """Record and print one PASS/FAIL line per acceptance criterion."""

    def report(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
