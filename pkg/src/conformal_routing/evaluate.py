"""Permutation experiments: interval coverage and realized route cost per method."""

from __future__ import annotations

import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse.csgraph import dijkstra

from .conformal import IntervalSet, Method, calibrate
from .errors import ConfigError, SamplingError, ValidationError
from .graph import EdgeSplit, Graph, MaskedWeightMatrix, build_masked_weights, permute_ct
from .model import EdgePrediction, QuantileModel, predict
from .planner import CostVector, Router, cost_vector, known_weights, realized_cost

ALL_METHODS = (Method.BASIC, Method.QR, Method.CQR, Method.CQR_ERC)
MAX_PAIR_REJECTIONS = 100


@dataclass(frozen=True)
class ExperimentSpec:
    alpha: float = 0.05
    methods: tuple = ALL_METHODS
    n_st_pairs: int = 20
    n_permutations: int = 100
    permutation_counts: tuple = (50, 100, 1000)
    calib_fraction: float = 0.5
    basic_lambda: float | None = None
    cost_quantile: float = 0.95
    reveal_known: bool = False
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        methods = tuple(Method.parse(m) for m in self.methods)
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "permutation_counts", tuple(int(c) for c in self.permutation_counts))
        if not methods:
            raise ConfigError("at least one method is required")
        if self.n_st_pairs < 1 or self.n_permutations < 1 or self.jobs < 1:
            raise ConfigError("pair, permutation and job counts must be positive")
        if not self.permutation_counts or min(self.permutation_counts) < 1:
            raise ConfigError("permutation counts must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.cost_quantile <= 1.0:
            raise ConfigError("cost_quantile must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = [m.value for m in self.methods]
        d["permutation_counts"] = list(self.permutation_counts)
        return d


@dataclass
class ResultTable:
    """Rows of per-method summaries plus provenance metadata."""

    kind: str
    rows: list
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("n_permutations", "method", "mean_cost", "cost_std", "mean_coverage", "mean_width")

    def __post_init__(self):
        for row in self.rows:
            cov = row.get("mean_coverage")
            if cov is not None and not 0.0 <= cov <= 1.0:
                raise ValidationError(f"coverage {cov} outside [0, 1]")
            width = row.get("mean_width")
            if width is not None and width < 0:
                raise ValidationError(f"negative width {width}")

    def row(self, method, n_permutations=None) -> dict:
        method = Method.parse(method).value
        for r in self.rows:
            if r["method"] == method and (n_permutations is None or r["n_permutations"] == n_permutations):
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key in sorted(self.metadata):
            buf.write(f"# {key}: {json.dumps(self.metadata[key], sort_keys=True)}\n")
        buf.write(",".join(self.COLUMNS) + "\n")
        for r in self.rows:
            buf.write(",".join(_fmt(r.get(c)) for c in self.COLUMNS) + "\n")
        return buf.getvalue()

    def to_text(self) -> str:
        methods = list(dict.fromkeys(r["method"] for r in self.rows))
        if self.kind == "cost":
            head = ["", *methods]
            cells = ["cost"]
            for m in methods:
                r = self.row(m)
                cells.append(f"{r['mean_cost']:.3f}({r['cost_std']:.2f})")
            lines = [head, cells]
        else:
            head = ["number of permutation", *methods]
            lines = [head]
            for n in dict.fromkeys(r["n_permutations"] for r in self.rows):
                cells = [str(n)]
                for m in methods:
                    r = self.row(m, n)
                    cells.append(f"{r['mean_coverage']:.4f}({r['mean_width']:.2f})")
                lines.append(cells)
        widths = [max(len(row[i]) for row in lines) for i in range(len(lines[0]))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in lines) + "\n"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def coverage(intervals: IntervalSet, weights, test_edges) -> float:
    """Fraction of ``test_edges`` whose true weight lies in its closed interval."""
    test_edges = np.asarray(test_edges, dtype=np.int64).reshape(-1)
    if test_edges.size == 0:
        raise ValidationError("coverage needs at least one test edge")
    sub = intervals.take(test_edges)
    w = np.asarray(weights, dtype=float)[test_edges]
    if np.isnan(w).any():
        raise ValidationError("true weights missing for some test edges")
    return float(np.mean((sub.lo <= w) & (w <= sub.hi)))


def mean_width(intervals: IntervalSet) -> float:
    return float(np.mean(intervals.width)) if len(intervals) else 0.0


def permutation_seed(seed: int, index: int):
    return (int(seed), 1, int(index))


class Experiment:
    """Shared state of one experiment: graph, fixed split and trained model."""

    def __init__(self, spec: ExperimentSpec, g: Graph, split: EdgeSplit, model: QuantileModel,
                 masked: MaskedWeightMatrix | None = None):
        if not math.isclose(spec.alpha, model.config.alpha):
            raise ConfigError(
                f"experiment alpha {spec.alpha} differs from the model's quantile level {model.config.alpha}"
            )
        if not g.fully_observed:
            raise ValidationError("evaluation needs the true weight of every edge")
        self.spec, self.graph, self.split, self.model = spec, g, split, model
        self.masked = masked if masked is not None else build_masked_weights(g, split, model.config.fill)
        self.pred: EdgePrediction = predict(model, g, self.masked)
        self.train_weights = g.weights[np.asarray(split.train)]

    def permutation(self, index: int) -> EdgeSplit:
        return permute_ct(self.split, self.spec.calib_fraction, permutation_seed(self.spec.seed, index))

    def intervals(self, split: EdgeSplit, edges=None) -> dict:
        """Intervals of every method on ``edges`` (the split's test set by default)."""
        edges = split.test if edges is None else edges
        calib = np.asarray(split.calib, dtype=np.int64)
        return {
            m: calibrate(m, self.pred, calib, self.graph.weights[calib], edges, self.spec.alpha,
                         train_weights=self.train_weights, lam=self.spec.basic_lambda)
            for m in self.spec.methods
        }

    def _map(self, fn, items):
        if self.spec.jobs == 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(max_workers=self.spec.jobs) as pool:
            return list(pool.map(fn, items))

    # ------------------------------------------------------------- coverage

    def _coverage_job(self, index):
        split = self.permutation(index)
        out = {}
        for m, iv in self.intervals(split).items():
            out[m] = (coverage(iv, self.graph.weights, split.test), mean_width(iv), iv.q)
        return index, out

    def run_coverage(self) -> ResultTable:
        n_max = max(self.spec.permutation_counts)
        results = sorted(self._map(self._coverage_job, range(n_max)), key=lambda r: r[0])
        rows = []
        for n in self.spec.permutation_counts:
            for m in self.spec.methods:
                cov = np.array([r[1][m][0] for r in results[:n]])
                wid = np.array([r[1][m][1] for r in results[:n]])
                rows.append({
                    "n_permutations": n,
                    "method": m.value,
                    "mean_cost": None,
                    "cost_std": None,
                    "mean_coverage": float(cov.mean()),
                    "mean_width": float(wid.mean()),
                })
        return ResultTable("coverage", rows, self.metadata())

    # ----------------------------------------------------------------- cost

    def sample_pairs(self) -> list:
        """I.i.d. uniform ``(s, t)`` pairs with ``t`` reachable from ``s``."""
        g = self.graph
        rng = np.random.default_rng((int(self.spec.seed), 2))
        reach = dijkstra(Router(g)._matrix(np.ones(g.n_edges)), directed=True, unweighted=True)
        pairs = []
        while len(pairs) < self.spec.n_st_pairs:
            for _ in range(MAX_PAIR_REJECTIONS):
                s, t = (int(x) for x in rng.integers(0, g.n_nodes, size=2))
                if s != t and np.isfinite(reach[s, t]):
                    pairs.append((s, t))
                    break
            else:
                raise SamplingError(
                    f"no reachable (s, t) pair after {MAX_PAIR_REJECTIONS} draws"
                )
        return pairs

    def cost_vectors(self, split: EdgeSplit) -> dict:
        """Per-method cost vectors plus the intervals they came from."""
        if self.spec.reveal_known:
            known, priced = known_weights(self.graph, split), split.test + split.unobserved
        else:
            known, priced = None, tuple(range(self.graph.n_edges))
        return {
            m: (cost_vector(iv, n_edges=self.graph.n_edges, known=known), iv)
            for m, iv in self.intervals(split, edges=priced).items()
        }

    def plans(self, index, pairs, router=None) -> dict:
        """Route plans of every method for permutation ``index``."""
        router = router or Router(self.graph)
        out = {}
        for m, (costs, _) in self.cost_vectors(self.permutation(index)).items():
            out[m] = []
            for s, t in pairs:
                plan = router.shortest_path(costs, s, t, m.value)
                plan.realized_cost = realized_cost(plan, self.graph.weights)
                out[m].append(plan)
        return out

    def _cost_job(self, index, pairs, router):
        split = self.permutation(index)
        out = {}
        for m, (costs, iv) in self.cost_vectors(split).items():
            realized = [realized_cost(router.shortest_path(costs, s, t, m.value), self.graph.weights)
                        for s, t in pairs]
            test_iv = iv.take(split.test)
            out[m] = (realized, coverage(test_iv, self.graph.weights, split.test), mean_width(test_iv))
        return index, out

    def run_cost(self) -> ResultTable:
        pairs = self.sample_pairs()
        router = Router(self.graph)
        results = sorted(
            self._map(lambda i: self._cost_job(i, pairs, router), range(self.spec.n_permutations)),
            key=lambda r: r[0],
        )
        rows = []
        for m in self.spec.methods:
            realized = np.array([r[1][m][0] for r in results])  # (perm, pair)
            per_pair = np.quantile(realized, self.spec.cost_quantile, axis=0)
            rows.append({
                "n_permutations": self.spec.n_permutations,
                "method": m.value,
                "mean_cost": float(per_pair.mean()),
                "cost_std": float(per_pair.std()),
                "mean_coverage": float(np.mean([r[1][m][1] for r in results])),
                "mean_width": float(np.mean([r[1][m][2] for r in results])),
            })
        oracle = self.oracle_costs(pairs, router)
        meta = self.metadata()
        meta["pairs"] = [[self.graph.node_ids[s], self.graph.node_ids[t]] for s, t in pairs]
        meta["oracle_mean_cost"] = float(oracle.mean())
        return ResultTable("cost", rows, meta)

    def oracle_costs(self, pairs, router=None) -> np.ndarray:
        """Realized cost of planning on the true weights (a lower bound)."""
        router = router or Router(self.graph)
        truth = CostVector(self.graph.weights, provenance="truth")
        return np.array([router.shortest_path(truth, s, t).worst_case_cost for s, t in pairs])

    def metadata(self) -> dict:
        return {
            "dataset_hash": self.graph.content_hash(),
            "fill": self.model.config.fill.value,
            "model_seed": self.model.config.seed,
            "experiment": {k: v for k, v in self.spec.to_dict().items() if k != "jobs"},
        }


def run_cost_experiment(spec: ExperimentSpec, g: Graph, split: EdgeSplit, model: QuantileModel) -> ResultTable:
    """Realized cost per method: per pair the ``cost_quantile`` over permutations,
    then mean and std over pairs."""
    return Experiment(spec, g, split, model).run_cost()


def run_coverage_experiment(spec: ExperimentSpec, g: Graph, split: EdgeSplit, model: QuantileModel) -> ResultTable:
    """Mean coverage and interval width per method for each permutation count."""
    return Experiment(spec, g, split, model).run_coverage()
