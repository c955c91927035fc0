"""Directed graph autoencoder with a mean head and two quantile heads.

The encoder alternates source and target propagation over the masked weighted
adjacency ``P``::

    S_l = relu(P   @ T_{l-1} @ BT_{l-1})
    T_l = relu(P.T @ S_l     @ BS_l)          l = 1..L, T_0 = X

and each head ``h`` projects the shared last layer into its own source and
target embeddings ``ZS_h = P @ T_L @ PS_h``, ``ZT_h = P.T @ S_L @ PT_h``.  An
edge ``(u, v)`` is scored by ``out_scale * ZS_h[u] . ZT_h[v]``.

By default the two aggregations are weighted averages rather than raw sums:
sources average over out-neighbours with ``D_out^-1 W`` and targets over
in-neighbours with ``D_in^-1 W.T``, where the degrees are weighted.  A
constant input then stays constant through every layer, so a constant
intercept column (added next to the standardised features) lets the decoder
represent a baseline weight.  ``propagation="normalized"`` uses one
symmetric matrix ``D_out^-1/2 W D_in^-1/2`` for both directions, and
``propagation="raw"`` only divides ``W`` by a fixed constant.
Edge scores are multiplied by the mean train weight; that constant could be
absorbed into the head weights and only affects conditioning.  Losses are
evaluated in raw weight units.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionError, StateError, TrainingDivergenceError, ValidationError
from .graph import EdgeSplit, FillStrategy, Graph, MaskedWeightMatrix, build_masked_weights
from .numerics import Adam, ParamSet, pinball_grad, pinball_loss

log = logging.getLogger(__name__)

HEADS = ("mean", "lo", "hi")
CHECKPOINT_FORMAT = "conformal-routing-model"
CHECKPOINT_VERSION = 1
PROPAGATIONS = ("normalized", "mean", "raw")


@dataclass(frozen=True)
class GaeConfig:
    """Architecture and optimisation settings."""

    n_layers: int = 2
    hidden_dims: tuple = (32, 32)
    embedding_dim: int = 16
    alpha: float = 0.05
    fill: FillStrategy = FillStrategy.GLOBAL_MEAN
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    max_epochs: int = 2000
    patience: int = 100
    seed: int = 0
    propagation: str = "mean"
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fill", FillStrategy(self.fill))
        dims = self.hidden_dims
        if isinstance(dims, int):
            dims = (dims,) * self.n_layers
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in dims))
        if self.n_layers < 1:
            raise ConfigError("need at least one propagation layer")
        if len(self.hidden_dims) != self.n_layers:
            raise ConfigError(f"{self.n_layers} layers but {len(self.hidden_dims)} hidden dims")
        if min(self.hidden_dims) < 1 or self.embedding_dim < 1:
            raise ConfigError("layer dimensions must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.lr <= 0 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("lr, max_epochs and patience must be positive")
        if self.propagation not in PROPAGATIONS:
            raise ConfigError(f"propagation must be one of {PROPAGATIONS}, got {self.propagation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fill"] = self.fill.value
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GaeConfig":
        return cls(**{**d, "hidden_dims": tuple(d["hidden_dims"])})


@dataclass(frozen=True, eq=False)
class EdgePrediction:
    """Per-edge ``(mean, lo, hi)`` predictions keyed by edge index."""

    edges: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        for name in ("edges", "mean", "lo", "hi"):
            a = np.array(getattr(self, name), dtype=np.int64 if name == "edges" else float)
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        n = self.edges.size
        if not (self.mean.size == self.lo.size == self.hi.size == n):
            raise DimensionError("prediction arrays must have one entry per edge")

    def __len__(self):
        return int(self.edges.size)

    def positions(self, edges) -> np.ndarray:
        lookup = {int(e): i for i, e in enumerate(self.edges)}
        try:
            return np.asarray([lookup[int(e)] for e in edges], dtype=np.int64)
        except KeyError as exc:
            raise ValidationError(f"no prediction for edge {exc.args[0]}") from None

    def take(self, edges) -> "EdgePrediction":
        """Predictions restricted to ``edges``, in that order."""
        idx = self.positions(edges)
        return EdgePrediction(self.edges[idx], self.mean[idx], self.lo[idx], self.hi[idx])


# ------------------------------------------------------------------ forward


def init_params(n_features: int, config: GaeConfig, rng=None) -> ParamSet:
    """Glorot-uniform initialisation from ``config.seed`` (or ``rng``)."""
    rng = np.random.default_rng(config.seed) if rng is None else rng

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    params = ParamSet()
    prev = n_features
    for l, h in enumerate(config.hidden_dims, start=1):
        params.add(f"bt{l - 1}", glorot(prev, h))
        params.add(f"bs{l}", glorot(h, h))
        prev = h
    for head in HEADS:
        params.add(f"ps_{head}", glorot(prev, config.embedding_dim))
        params.add(f"pt_{head}", glorot(prev, config.embedding_dim))
    return params


def _params_dict(params):
    return params.values if isinstance(params, ParamSet) else params


def _operators(prop):
    """Source and target aggregation operators.

    ``prop`` is either one matrix ``P`` (targets aggregate with ``P.T``) or a
    ``(source, target)`` pair.
    """
    src, tgt = prop if isinstance(prop, tuple) else (prop, prop.T)
    if sp.issparse(src):
        src, tgt = src.tocsr(), tgt.tocsr()
    return src, tgt


def _forward(x, prop, params, n_layers):
    p = _params_dict(params)
    prop, prop_t = _operators(prop)
    t_prev = x
    cache = {"layers": []}
    for l in range(1, n_layers + 1):
        n_in = prop @ t_prev
        c = n_in @ p[f"bt{l - 1}"]
        s = np.maximum(c, 0.0)
        m = prop_t @ s
        a = m @ p[f"bs{l}"]
        t = np.maximum(a, 0.0)
        cache["layers"].append((t_prev, n_in, c, s, m, a))
        t_prev = t
    s_last, t_last = cache["layers"][-1][3], t_prev
    src_in = prop @ t_last
    tgt_in = cache["layers"][-1][4]
    emb = {h: (src_in @ p[f"ps_{h}"], tgt_in @ p[f"pt_{h}"]) for h in HEADS}
    cache.update(prop=prop, prop_t=prop_t, src_in=src_in, tgt_in=tgt_in, s_last=s_last)
    return emb, cache


def encode(x, prop, params, n_layers: int) -> dict:
    """Source/target embeddings per head: ``{head: (ZS, ZT)}``.

    ``prop`` is used exactly as given (dense or scipy sparse).
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    for op in _operators(prop):
        if op.shape != (n, n):
            raise DimensionError(f"propagation matrix {op.shape} does not match {n} nodes")
    p = _params_dict(params)
    if p["bt0"].shape[0] != x.shape[1]:
        raise DimensionError(f"features have {x.shape[1]} columns, first layer expects {p['bt0'].shape[0]}")
    emb, _ = _forward(x, prop, params, n_layers)
    return emb


def decode(zs, zt, edges) -> np.ndarray:
    """Inner-product scores ``zs[u] . zt[v]`` for each ``(u, v)`` in ``edges``."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n_src, n_tgt = zs.shape[0], zt.shape[0]
    if edges.size and (edges.min() < 0 or edges[:, 0].max() >= n_src or edges[:, 1].max() >= n_tgt):
        raise ValidationError("edge endpoint out of range for the embeddings")
    return np.einsum("ij,ij->i", zs[edges[:, 0]], zt[edges[:, 1]])


# --------------------------------------------------------------- objective


@dataclass
class LossParts:
    gae: float
    pinball_lo: float
    pinball_hi: float

    @property
    def total(self) -> float:
        return self.gae + self.pinball_lo + self.pinball_hi


def _loss_from_scores(scores, y, alpha):
    resid = scores["mean"] - y
    gae = float(np.sqrt(np.sum(resid * resid)))
    lo = float(np.sum(pinball_loss(y, scores["lo"], alpha / 2)))
    hi = float(np.sum(pinball_loss(y, scores["hi"], 1 - alpha / 2)))
    return LossParts(gae, lo, hi), resid


def objective(params, x, prop, edges, y, alpha, n_layers, out_scale=1.0, with_grad=True):
    """Mean-head Frobenius residual plus both pinball sums over ``edges``.

    Returns ``(LossParts, grads)``; ``grads`` is ``None`` unless requested.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    y = np.asarray(y, dtype=float)
    emb, cache = _forward(x, prop, params, n_layers)
    scores = {h: out_scale * decode(*emb[h], edges) for h in HEADS}
    parts, resid = _loss_from_scores(scores, y, alpha)
    if not with_grad:
        return parts, None
    g_scores = {
        "mean": resid / parts.gae if parts.gae > 0 else np.zeros_like(resid),
        "lo": pinball_grad(y, scores["lo"], alpha / 2),
        "hi": pinball_grad(y, scores["hi"], 1 - alpha / 2),
    }
    return parts, _backward(params, emb, cache, edges, g_scores, n_layers, out_scale)


def _backward(params, emb, cache, edges, g_scores, n_layers, out_scale):
    p = _params_dict(params)
    # adjoints of the source and target aggregations
    prop, prop_t = cache["prop_t"].T, cache["prop"].T
    u, v = edges[:, 0], edges[:, 1]
    grads = {}
    d_src_in = np.zeros_like(cache["src_in"])
    d_tgt_in = np.zeros_like(cache["tgt_in"])
    for h in HEADS:
        zs, zt = emb[h]
        g = out_scale * g_scores[h][:, None]
        d_zs = np.zeros_like(zs)
        d_zt = np.zeros_like(zt)
        np.add.at(d_zs, u, g * zt[v])
        np.add.at(d_zt, v, g * zs[u])
        grads[f"ps_{h}"] = cache["src_in"].T @ d_zs
        grads[f"pt_{h}"] = cache["tgt_in"].T @ d_zt
        d_src_in += d_zs @ p[f"ps_{h}"].T
        d_tgt_in += d_zt @ p[f"pt_{h}"].T

    # src_in = P @ T_L ; tgt_in = P.T @ S_L is the last layer's m
    d_t = prop_t @ d_src_in
    d_m_extra = d_tgt_in
    for l in range(n_layers, 0, -1):
        t_prev, n_in, c, s, m, a = cache["layers"][l - 1]
        d_a = d_t * (a > 0)
        grads[f"bs{l}"] = m.T @ d_a
        d_m = d_a @ p[f"bs{l}"].T
        if l == n_layers:
            d_m = d_m + d_m_extra
        d_s = prop @ d_m
        d_c = d_s * (c > 0)
        grads[f"bt{l - 1}"] = n_in.T @ d_c
        if l > 1:
            d_t = prop_t @ (d_c @ p[f"bt{l - 1}"].T)
    return grads


# ---------------------------------------------------------------- training


@dataclass(eq=False)
class QuantileModel:
    """Trained parameters plus the fixed preprocessing constants."""

    config: GaeConfig
    params: dict
    feature_mean: np.ndarray
    feature_std: np.ndarray
    prop_scale: float
    out_scale: float
    trained: bool = False
    history: list = field(default_factory=list)
    best_epoch: int = 0

    def features(self, g: Graph) -> np.ndarray:
        x = (g.node_features - self.feature_mean) / self.feature_std
        if self.config.intercept:
            x = np.hstack([np.ones((g.n_nodes, 1)), x])
        return x

    def propagation(self, masked: MaskedWeightMatrix):
        return propagation_matrix(masked.values, self.config.propagation, self.prop_scale)

    def summary(self) -> dict:
        if not self.history:
            return {"epochs": 0}
        first, last = self.history[0], self.history[-1]
        best = self.history[self.best_epoch]
        return {
            "epochs": len(self.history),
            "best_epoch": self.best_epoch,
            "initial_train_loss": first[1],
            "final_train_loss": last[1],
            "best_train_loss": best[1],
            "best_val_loss": best[2],
        }


def _standardisation(features):
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def propagation_matrix(values, kind: str = "normalized", scale: float = 1.0):
    """Sparse propagation operator(s) built from the masked weights.

    ``"mean"`` returns a ``(source, target)`` pair of weighted-average
    operators over out- and in-neighbours; the other kinds return one matrix.
    """
    w = sp.csr_matrix(np.asarray(values, dtype=float))
    if kind == "raw":
        return (w / scale).tocsr()
    if kind == "mean":
        d_out = np.asarray(w.sum(axis=1)).ravel()
        d_in = np.asarray(w.sum(axis=0)).ravel()
        src = sp.diags(1.0 / np.where(d_out > 0, d_out, 1.0)) @ w
        tgt = sp.diags(1.0 / np.where(d_in > 0, d_in, 1.0)) @ w.T
        return src.tocsr(), tgt.tocsr()
    d_out = np.asarray(w.sum(axis=1)).ravel()
    d_in = np.asarray(w.sum(axis=0)).ravel()
    d_out = np.where(d_out > 0, d_out, 1.0) ** -0.5
    d_in = np.where(d_in > 0, d_in, 1.0) ** -0.5
    return (sp.diags(d_out) @ w @ sp.diags(d_in)).tocsr()


def _prop_scale(values):
    """Mean row sum over nonempty rows of the masked matrix."""
    rows = np.asarray(values).sum(axis=1)
    rows = rows[rows > 0]
    return float(rows.mean()) if rows.size else 1.0


def train(g: Graph, split: EdgeSplit, config: GaeConfig, masked: MaskedWeightMatrix | None = None) -> QuantileModel:
    """Fit all three heads with Adam and keep the best-validation snapshot.

    Raises
    ------
    TrainingDivergenceError
        If the loss or a gradient becomes non-finite.
    """
    if not split.train or not split.val:
        raise ValidationError("training needs nonempty train and val sets")
    if masked is None:
        masked = build_masked_weights(g, split, config.fill)
    elif masked.fill_strategy is not config.fill:
        raise ConfigError("masked weights were built with a different fill strategy")

    feat_mean, feat_std = _standardisation(g.node_features)
    train_idx = np.asarray(split.train, dtype=np.int64)
    val_idx = np.asarray(split.val, dtype=np.int64)
    model = QuantileModel(
        config=config,
        params={},
        feature_mean=feat_mean,
        feature_std=feat_std,
        prop_scale=_prop_scale(masked.values),
        out_scale=float(g.weights[train_idx].mean()) or 1.0,
    )
    x = model.features(g)
    prop = model.propagation(masked)
    e_tr, y_tr = g.edges[train_idx], g.weights[train_idx]
    e_va, y_va = g.edges[val_idx], g.weights[val_idx]

    params = init_params(x.shape[1], config)
    opt = Adam(config.lr, config.beta1, config.beta2)
    best_val, best, stale = np.inf, params.snapshot(), 0
    history = []
    # overflow shows up as a non-finite loss, reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.max_epochs + 1):
            emb, cache = _forward(x, prop, params, config.n_layers)
            tr_scores = {h: model.out_scale * decode(*emb[h], e_tr) for h in HEADS}
            va_scores = {h: model.out_scale * decode(*emb[h], e_va) for h in HEADS}
            tr_parts, resid = _loss_from_scores(tr_scores, y_tr, config.alpha)
            va_parts, _ = _loss_from_scores(va_scores, y_va, config.alpha)
            if not (np.isfinite(tr_parts.total) and np.isfinite(va_parts.total)):
                raise TrainingDivergenceError(
                    f"loss became non-finite at epoch {epoch}; lower the learning rate (lr={config.lr})"
                )
            history.append((epoch, tr_parts.total, va_parts.total))
            if va_parts.total < best_val:
                best_val, best, stale, model.best_epoch = va_parts.total, params.snapshot(), 0, epoch
            else:
                stale += 1
            if stale >= config.patience or epoch == config.max_epochs:
                break
            g_scores = {
                "mean": resid / tr_parts.gae if tr_parts.gae > 0 else np.zeros_like(resid),
                "lo": pinball_grad(y_tr, tr_scores["lo"], config.alpha / 2),
                "hi": pinball_grad(y_tr, tr_scores["hi"], 1 - config.alpha / 2),
            }
            params.set_grads(_backward(params, emb, cache, e_tr, g_scores, config.n_layers, model.out_scale))
            opt.step(params)

    log.info("trained %d epochs, best epoch %d (val loss %.6g)", len(history), model.best_epoch, best_val)
    model.params = best
    model.history = history
    model.trained = True
    return model


def predict(model: QuantileModel, g: Graph, masked: MaskedWeightMatrix, edges=None) -> EdgePrediction:
    """Triple-head predictions for ``edges`` (all edges by default).

    Crossed quantiles are repaired by sorting each ``(lo, hi)`` pair.
    """
    if not model.trained:
        raise StateError("model has not been trained")
    if masked.fill_strategy is not model.config.fill:
        raise ConfigError(
            f"masked weights use {masked.fill_strategy.value}, model was trained with {model.config.fill.value}"
        )
    edges = np.arange(g.n_edges) if edges is None else np.asarray(edges, dtype=np.int64).reshape(-1)
    if edges.size and (edges.min() < 0 or edges.max() >= g.n_edges):
        raise ValidationError("edge index out of range")
    emb = encode(model.features(g), model.propagation(masked), model.params, model.config.n_layers)
    pairs = g.edges[edges]
    out = {h: model.out_scale * decode(*emb[h], pairs) for h in HEADS}
    lo = np.minimum(out["lo"], out["hi"])
    hi = np.maximum(out["lo"], out["hi"])
    return EdgePrediction(edges, out["mean"], lo, hi)


# ------------------------------------------------------------- checkpoint


def model_to_dict(model: QuantileModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": {
            name: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
            for name, v in model.params.items()
        },
        "feature_mean": model.feature_mean.tolist(),
        "feature_std": model.feature_std.tolist(),
        "prop_scale": model.prop_scale,
        "out_scale": model.out_scale,
        "trained": model.trained,
        "best_epoch": model.best_epoch,
        "history_summary": model.summary(),
    }


def model_from_dict(d: dict) -> QuantileModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError("not a model checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(
            f"checkpoint version {d.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    params = {
        name: np.asarray(p["data"], dtype=float).reshape(p["shape"]) for name, p in d["params"].items()
    }
    return QuantileModel(
        config=GaeConfig.from_dict(d["config"]),
        params=params,
        feature_mean=np.asarray(d["feature_mean"], dtype=float),
        feature_std=np.asarray(d["feature_std"], dtype=float),
        prop_scale=float(d["prop_scale"]),
        out_scale=float(d["out_scale"]),
        trained=bool(d["trained"]),
        best_epoch=int(d.get("best_epoch", 0)),
    )


def save_model(model: QuantileModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    payload = model_to_dict(model)
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return path


def load_model(path) -> tuple[QuantileModel, dict]:
    """Load a checkpoint; returns the model and the raw payload."""
    payload = json.loads(Path(path).read_text())
    return model_from_dict(payload), payload
