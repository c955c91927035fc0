"""Command-line interface.

Subcommands
-----------
ingest     convert a TNTP network (or a synthetic one) to the CSV format
train      fit the quantile GAE and write a checkpoint plus its training curve
calibrate  write calibrated intervals for one method
plan       print a robust route as JSON
evaluate   run the permutation experiments and write the result tables

Settings come from built-in defaults, then ``--config FILE`` (JSON), then
command-line flags, each overriding the previous.  Logs go to stderr.

Exit codes: 0 success, 2 configuration or input error, 3 no path,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as gio
from .conformal import Method, calibrate
from .errors import ConfigError, NoPathError, ParseError, RoutingError, ValidationError
from .evaluate import ALL_METHODS, Experiment, ExperimentSpec, permutation_seed
from .graph import EdgeSplit, FillStrategy, Graph, build_masked_weights, permute_ct, split_edges
from .model import GaeConfig, load_model, predict, save_model, train
from .planner import Router, cost_vector, known_weights, realized_cost
from .synthetic import road_network

log = logging.getLogger("conformal_routing")

EXIT_OK, EXIT_INPUT, EXIT_NO_PATH, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "alpha": 0.05,
    "fill": FillStrategy.GLOBAL_MEAN.value,
    "method": Method.CQR.value,
    "seed": 0,
    "split_seed": 0,
    "fractions": [0.5, 0.1, 0.4],
    "calib_fraction": 0.5,
    "permutation": 0,
    "jobs": 1,
    "format": "csv",
    "weight_column": "volume",
    "model": {},
    "experiment": {},
}

CHECKPOINT_FILE = "model.json"
CURVE_FILE = "training_curve.csv"
TABLE_NAMES = {
    ("cost", FillStrategy.GLOBAL_MEAN): "table1_cost_global-mean",
    ("cost", FillStrategy.NEIGHBORHOOD): "table2_cost_neighborhood",
    ("coverage", FillStrategy.GLOBAL_MEAN): "table3_coverage_global-mean",
    ("coverage", FillStrategy.NEIGHBORHOOD): "table4_coverage_neighborhood",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p, *names):
    if "alpha" in names:
        p.add_argument("--alpha", type=float, help="miscoverage rate in (0, 1)")
    if "fill" in names:
        p.add_argument("--fill", choices=[f.value for f in FillStrategy], help="masked-weight fill strategy")
    if "method" in names:
        p.add_argument("--method", help="Basic, QR, CQR or CQR_ERC")
    if "seed" in names:
        p.add_argument("--seed", type=int, help="run seed")
    if "jobs" in names:
        p.add_argument("--jobs", type=int, help="worker threads for the experiments")
    if "format" in names:
        p.add_argument("--format", choices=list(gio.FORMATS), help="dataset format")
    p.add_argument("--config", type=Path, help="JSON file with default settings")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="conformal-routing", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="convert a dataset to the CSV graph format")
    p.add_argument("path", nargs="?", type=Path, help="TNTP net file/directory or CSV directory")
    p.add_argument("--synthetic", type=int, metavar="SEED", help="generate a synthetic road network instead")
    p.add_argument("--weight-column", dest="weight_column", help="TNTP weight column (default volume)")
    p.add_argument("--keep-zones", action="store_true", help="keep TNTP zone centroids")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _common(p, "format")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("data", type=Path, help="dataset path")
    p.add_argument("--split-seed", dest="split_seed", type=int, help="seed of the train/val/ct split")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _common(p, "alpha", "fill", "seed", "format")

    p = sub.add_parser("calibrate", help="write calibrated intervals as CSV")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--permutation", type=int, help="index of the calib/test permutation")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _common(p, "alpha", "method", "seed")

    p = sub.add_parser("plan", help="print a robust route as JSON")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--source", type=int, required=True, help="source node id")
    p.add_argument("--target", type=int, required=True, help="target node id")
    p.add_argument("--permutation", type=int, help="index of the calib/test permutation")
    p.add_argument("--reveal-known", dest="reveal_known", action="store_true", default=None,
                   help="cost train/val/calib edges at their observed weights")
    _common(p, "alpha", "method", "seed")

    p = sub.add_parser("evaluate", help="run the coverage and cost experiments")
    p.add_argument("checkpoints", type=Path, nargs="+", help="one checkpoint per fill strategy")
    p.add_argument("--pairs", type=int, help="number of (s, t) pairs")
    p.add_argument("--permutations", type=int, help="permutations in the cost experiment")
    p.add_argument("--permutation-counts", dest="permutation_counts", type=int, nargs="+",
                   help="permutation counts of the coverage tables")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _common(p, "alpha", "seed", "jobs")
    return parser


# ---------------------------------------------------------------- config


def effective_config(args) -> tuple[dict, set]:
    """Defaults, overridden by the ``--config`` file, overridden by flags.

    Returns the merged settings and the names set explicitly by either.
    """
    cfg = json.loads(json.dumps(DEFAULTS))
    explicit = set()
    if getattr(args, "config", None) is not None:
        path = args.config
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(path, exc.lineno, exc.msg) from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"{path}: unknown settings {unknown}")
        for key in ("model", "experiment"):
            cfg[key].update(loaded.pop(key, {}))
        cfg.update(loaded)
        explicit.update(loaded)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
            explicit.add(key)
    for key in ("pairs", "permutations", "permutation_counts", "reveal_known"):
        value = getattr(args, key, None)
        if value is not None:
            target = {"pairs": "n_st_pairs", "permutations": "n_permutations"}.get(key, key)
            cfg["experiment"][target] = value
    return cfg, explicit


def gae_config(cfg: dict) -> GaeConfig:
    fields = dict(cfg["model"])
    fields.update(alpha=cfg["alpha"], fill=cfg["fill"], seed=cfg["seed"])
    try:
        return GaeConfig(**fields)
    except TypeError as exc:
        raise ConfigError(f"bad model settings: {exc}") from None


def experiment_spec(cfg: dict, alpha: float) -> ExperimentSpec:
    fields = {"methods": [m.value for m in ALL_METHODS], **cfg["experiment"]}
    fields.update(alpha=alpha, seed=cfg["seed"], jobs=cfg["jobs"], calib_fraction=cfg["calib_fraction"])
    for key in ("methods", "permutation_counts"):
        if key in fields:
            fields[key] = tuple(fields[key])
    try:
        return ExperimentSpec(**fields)
    except TypeError as exc:
        raise ConfigError(f"bad experiment settings: {exc}") from None


# ------------------------------------------------------------- artifacts


def _load_dataset(path: Path, fmt: str, weight_column: str = "volume", keep_zones: bool = False) -> Graph:
    if fmt == "tntp":
        return gio.load_graph(path, "tntp", weight_column=weight_column, drop_zones=not keep_zones)
    return gio.load_graph(path, fmt)


class Run:
    """A checkpoint together with the dataset and split it was trained on."""

    def __init__(self, checkpoint: Path):
        if not checkpoint.exists():
            raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
        if checkpoint.is_dir():
            checkpoint = checkpoint / CHECKPOINT_FILE
            if not checkpoint.is_file():
                raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
        try:
            self.model, payload = load_model(checkpoint)
        except json.JSONDecodeError as exc:
            raise ParseError(checkpoint, exc.lineno, exc.msg) from None
        try:
            ds = payload["dataset"]
            self.split = EdgeSplit.from_dict(payload["split"])
            self.run_config = payload["run_config"]
        except KeyError as exc:
            raise ValidationError(f"{checkpoint}: missing {exc.args[0]!r}") from None
        self.graph = _load_dataset(Path(ds["path"]), ds["format"], ds.get("weight_column", "volume"),
                                   ds.get("keep_zones", False))
        if self.graph.content_hash() != ds["hash"]:
            raise ValidationError(f"dataset {ds['path']} changed since the checkpoint was written")
        self.masked = build_masked_weights(self.graph, self.split, self.model.config.fill)
        self.path = checkpoint

    def permutation(self, cfg, index=None) -> EdgeSplit:
        index = cfg["permutation"] if index is None else index
        return permute_ct(self.split, cfg["calib_fraction"], permutation_seed(cfg["seed"], index))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _ensure_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


# -------------------------------------------------------------- commands


def cmd_ingest(args, cfg, explicit) -> int:
    if args.synthetic is not None:
        g = road_network(seed=args.synthetic)
        source = {"synthetic_seed": args.synthetic}
    else:
        if args.path is None:
            raise ConfigError("ingest needs a dataset path or --synthetic SEED")
        g = _load_dataset(args.path, cfg["format"], cfg["weight_column"], args.keep_zones)
        source = {"path": str(args.path), "format": cfg["format"], "weight_column": cfg["weight_column"]}
    out = _ensure_dir(args.out)
    gio.write_csv_graph(g, out)
    _write_json(out / "graph.json", {
        "source": source,
        "n_nodes": g.n_nodes,
        "n_edges": g.n_edges,
        "n_observed": int(g.observed.sum()),
        "hash": g.content_hash(),
    })
    log.info("wrote %d nodes and %d edges to %s", g.n_nodes, g.n_edges, out)
    return EXIT_OK


def cmd_train(args, cfg, explicit) -> int:
    config = gae_config(cfg)
    if not args.data.exists():
        raise FileNotFoundError(f"dataset not found: {args.data}")
    g = _load_dataset(args.data, cfg["format"], cfg["weight_column"])
    split = split_edges(g, cfg["fractions"], seed=cfg["split_seed"])
    log.info("split: %d train, %d val, %d ct", len(split.train), len(split.val), len(split.ct))
    model = train(g, split, config)
    out = _ensure_dir(args.out)
    extra = {
        "dataset": {
            "path": str(args.data.resolve()),
            "format": cfg["format"],
            "weight_column": cfg["weight_column"],
            "hash": g.content_hash(),
        },
        "split": split.to_dict(),
        "run_config": cfg,
    }
    save_model(model, out / CHECKPOINT_FILE, extra=extra)
    with open(out / CURVE_FILE, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in model.history:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])
    log.info("checkpoint written to %s", out / CHECKPOINT_FILE)
    return EXIT_OK


def _calibrated(run: Run, cfg, split: EdgeSplit, edges):
    calib = np.asarray(split.calib, dtype=np.int64)
    pred = predict(run.model, run.graph, run.masked)
    lam = cfg["experiment"].get("basic_lambda")
    return calibrate(cfg["method"], pred, calib, run.graph.weights[calib], edges, cfg["alpha"],
                     train_weights=run.graph.weights[np.asarray(run.split.train)], lam=lam)


def _inherit(cfg, run: Run, explicit):
    """Fill settings the user did not give from the checkpoint's run."""
    for key in ("alpha", "seed", "calib_fraction"):
        if key not in explicit:
            cfg[key] = run.run_config.get(key, cfg[key])
    cfg["method"] = Method.parse(cfg["method"]).value
    return cfg


def cmd_calibrate(args, cfg, explicit) -> int:
    run = Run(args.checkpoint)
    cfg = _inherit(cfg, run, explicit)
    split = run.permutation(cfg)
    iv = _calibrated(run, cfg, split, split.test + split.unobserved)
    out = _ensure_dir(args.out)
    weights = run.graph.weights
    iv.to_csv(out / f"intervals_{iv.method.value}.csv", run.graph, true_weights=weights)
    _write_json(out / f"intervals_{iv.method.value}.json", {
        "method": iv.method.value,
        "alpha": iv.alpha,
        "q": iv.q,
        "permutation": cfg["permutation"],
        "n_calib": len(split.calib),
        "n_test": len(split.test),
        "config": cfg,
    })
    return EXIT_OK


def cmd_plan(args, cfg, explicit) -> int:
    run = Run(args.checkpoint)
    cfg = _inherit(cfg, run, explicit)
    g = run.graph
    s, t = g.node(args.source), g.node(args.target)
    split = run.permutation(cfg)
    if cfg["experiment"].get("reveal_known"):
        known, priced = known_weights(g, split), split.test + split.unobserved
    else:
        known, priced = None, tuple(range(g.n_edges))
    iv = _calibrated(run, cfg, split, priced)
    costs = cost_vector(iv, n_edges=g.n_edges, known=known)
    plan = Router(g).shortest_path(costs, s, t, iv.method.value)
    if not np.isnan(g.weights[plan.path]).any():
        plan.realized_cost = realized_cost(plan, g.weights)
    result = plan.to_dict(g)
    result["config"] = cfg
    sys.stdout.write(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _scatter_rows(ex: Experiment):
    split = ex.permutation(0)
    g = ex.graph
    for m, iv in ex.intervals(split).items():
        for e, lo, hi in zip(iv.edges, iv.lo, iv.hi):
            w = float(g.weights[e])
            u, v = g.edges[e]
            yield [int(e), g.node_ids[u], g.node_ids[v], m.value, repr(w), repr(float(lo)), repr(float(hi)),
                   int(lo <= w <= hi)]


def cmd_evaluate(args, cfg, explicit) -> int:
    out = _ensure_dir(args.out)
    texts = []
    seen = set()
    for ckpt in args.checkpoints:
        run = Run(ckpt)
        run_cfg = _inherit(dict(cfg), run, explicit)
        fill = run.model.config.fill
        if fill in seen:
            raise ConfigError(f"two checkpoints use the {fill.value} fill strategy")
        seen.add(fill)
        spec = experiment_spec(run_cfg, run_cfg["alpha"])
        ex = Experiment(spec, run.graph, run.split, run.model, run.masked)
        log.info("%s: coverage experiment", fill.value)
        cov = ex.run_coverage()
        log.info("%s: cost experiment", fill.value)
        cost = ex.run_cost()
        for table in (cost, cov):
            table.metadata["checkpoint_config"] = run.model.config.to_dict()
            # the worker count never changes results, so it stays out of the record
            table.metadata["run_config"] = {k: v for k, v in run_cfg.items() if k != "jobs"}
            name = TABLE_NAMES[table.kind, fill]
            (out / f"{name}.csv").write_text(table.to_csv())
            texts.append(f"{name}\n{table.to_text()}")

        with open(out / f"intervals_scatter_{fill.value}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["edge", "edge_src", "edge_dst", "method", "true_w", "lo", "hi", "covered"])
            w.writerows(_scatter_rows(ex))

        pairs = [(run.graph.node(a), run.graph.node(b)) for a, b in cost.metadata["pairs"]]
        router = Router(run.graph)
        plans = ex.plans(0, pairs, router)
        truth = ex.oracle_costs(pairs, router)
        overlay = {
            "fill": fill.value,
            "permutation": 0,
            "pairs": [
                {
                    "source": run.graph.node_ids[s],
                    "target": run.graph.node_ids[t],
                    "oracle_cost": float(truth[i]),
                    "plans": {m.value: plans[m][i].to_dict(run.graph) for m in plans},
                }
                for i, (s, t) in enumerate(pairs)
            ],
        }
        _write_json(out / f"paths_{fill.value}.json", overlay)
    (out / "tables.txt").write_text("\n".join(texts))
    sys.stdout.write("\n".join(texts))
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "plan": cmd_plan,
    "evaluate": cmd_evaluate,
}


def _setup_logging(args):
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    _setup_logging(args)
    try:
        cfg, explicit = effective_config(args)
        return COMMANDS[args.command](args, cfg, explicit)
    except NoPathError as exc:
        print(f"error: no path: {exc}", file=sys.stderr)
        return EXIT_NO_PATH
    except ArithmeticError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RoutingError, ValueError, OSError) as exc:
        kind = type(exc).__name__
        print(f"error: {kind}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
