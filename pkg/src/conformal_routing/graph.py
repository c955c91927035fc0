"""Directed road graph, edge splits and the masked weighted adjacency.

Edges are addressed by their position in ``Graph.edges``; every index set in
this module (train, val, calib, test) is a sorted tuple of such positions.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError, ValidationError


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


class FillStrategy(str, enum.Enum):
    """How unknown (non-train) edges are filled in the masked weight matrix."""

    GLOBAL_MEAN = "global-mean"
    NEIGHBORHOOD = "neighborhood"


@dataclass(frozen=True, eq=False)
class Graph:
    """Directed graph with node features and partially observed edge weights.

    Parameters
    ----------
    n_nodes : int
        Number of nodes; nodes are indexed ``0 .. n_nodes - 1``.
    node_features : array of shape (n_nodes, p)
        Real node features, e.g. coordinates.
    edges : array of shape (m, 2)
        Directed ``(source, target)`` pairs, no duplicates.
    weights : array of shape (m,)
        Observed edge weights; ``nan`` marks an unobserved edge.
    node_ids : tuple of int, optional
        External labels of the nodes (defaults to ``0 .. n_nodes - 1``).
    """

    n_nodes: int
    node_features: np.ndarray
    edges: np.ndarray
    weights: np.ndarray
    node_ids: tuple = field(default=())

    def __post_init__(self):
        feats = _frozen(self.node_features, float)
        if feats.ndim == 1:
            feats = _frozen(feats.reshape(-1, 1), float)
        edges = _frozen(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2), np.int64)
        weights = _frozen(self.weights, float).reshape(-1)
        object.__setattr__(self, "node_features", feats)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)
        if not self.node_ids:
            object.__setattr__(self, "node_ids", tuple(range(self.n_nodes)))
        else:
            object.__setattr__(self, "node_ids", tuple(int(i) for i in self.node_ids))
        self._validate()

    def _validate(self):
        n = self.n_nodes
        if n < 1:
            raise ValidationError("graph needs at least one node")
        if self.node_features.shape[0] != n:
            raise ValidationError(
                f"node_features has {self.node_features.shape[0]} rows, expected {n}"
            )
        if not np.all(np.isfinite(self.node_features)):
            raise ValidationError("node features must be finite")
        if len(self.node_ids) != n or len(set(self.node_ids)) != n:
            raise ValidationError("node_ids must be n_nodes distinct labels")
        if self.weights.shape[0] != self.edges.shape[0]:
            raise ValidationError("one weight per edge required")
        if self.edges.size:
            bad = (self.edges < 0) | (self.edges >= n)
            if bad.any():
                i = int(np.argwhere(bad.any(axis=1))[0, 0])
                u, v = self.edges[i]
                raise ValidationError(f"edge {i} ({u}, {v}) has an endpoint outside [0, {n})")
        if len(self.edge_index) != self.edges.shape[0]:
            raise ValidationError("duplicate directed edges")
        w = self.weights[self.observed]
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("observed weights must be finite and nonnegative")

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @cached_property
    def edge_index(self) -> dict:
        """Map ``(source, target)`` to the edge's position."""
        return {(int(u), int(v)): i for i, (u, v) in enumerate(self.edges)}

    @cached_property
    def observed(self) -> np.ndarray:
        mask = ~np.isnan(self.weights)
        mask.flags.writeable = False
        return mask

    @property
    def fully_observed(self) -> bool:
        return bool(self.observed.all())

    @cached_property
    def label_index(self) -> dict:
        return {label: i for i, label in enumerate(self.node_ids)}

    def node(self, label: int) -> int:
        """Internal index of the node with external label ``label``."""
        try:
            return self.label_index[int(label)]
        except KeyError:
            raise ValidationError(f"unknown node {label}") from None

    def adjacency(self) -> np.ndarray:
        """Binary structural adjacency matrix."""
        a = np.zeros((self.n_nodes, self.n_nodes))
        a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        return a

    def content_hash(self) -> str:
        """SHA-256 over nodes, features, edges and weights."""
        h = hashlib.sha256()
        h.update(np.asarray(self.node_ids, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.node_features).tobytes())
        h.update(np.ascontiguousarray(self.edges).tobytes())
        h.update(np.ascontiguousarray(self.weights).tobytes())
        return h.hexdigest()


def _sorted_tuple(idx):
    return tuple(sorted(int(i) for i in idx))


@dataclass(frozen=True)
class EdgeSplit:
    """Disjoint partition of edge indices.

    ``calib`` and ``test`` together form the calibration/test pool; straight
    after :func:`split_edges` the whole pool sits in ``test``.  Edges with no
    observed weight cannot be trained or calibrated on and are kept apart in
    ``unobserved``.
    """

    train: tuple
    val: tuple
    calib: tuple
    test: tuple
    unobserved: tuple = ()

    def __post_init__(self):
        for name in ("train", "val", "calib", "test", "unobserved"):
            object.__setattr__(self, name, _sorted_tuple(getattr(self, name)))
        if not self.train or not self.val:
            raise ValidationError("train and val sets must be nonempty")
        parts = [self.train, self.val, self.calib, self.test, self.unobserved]
        if sum(len(p) for p in parts) != len(set().union(*map(set, parts))):
            raise ValidationError("split sets overlap")

    @property
    def ct(self) -> tuple:
        """The combined calibration/test pool."""
        return _sorted_tuple(self.calib + self.test)

    @property
    def all_edges(self) -> tuple:
        return _sorted_tuple(self.train + self.val + self.calib + self.test + self.unobserved)

    @property
    def known(self) -> tuple:
        """Edges whose weights are revealed at decision time."""
        return _sorted_tuple(self.train + self.val + self.calib)

    def to_dict(self) -> dict:
        return {
            "train": list(self.train),
            "val": list(self.val),
            "calib": list(self.calib),
            "test": list(self.test),
            "unobserved": list(self.unobserved),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EdgeSplit":
        return cls(d["train"], d["val"], d["calib"], d["test"], d.get("unobserved", ()))


def split_edges(g: Graph, fractions=(0.5, 0.1, 0.4), seed: int = 0) -> EdgeSplit:
    """Randomly split the observed edges into train, val and the ct pool.

    Sizes are ``round(fraction * m)`` for train and val over the ``m`` observed
    edges, with the remainder going to the pool.  The pool is returned
    unsplit in ``test``; use :func:`permute_ct` to carve out ``calib``.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions):g}")
    observed = np.flatnonzero(g.observed)
    m = observed.size
    n_train = int(round(fractions[0] * m))
    n_val = int(round(fractions[1] * m))
    if n_train < 1 or n_val < 1 or n_train + n_val >= m:
        raise ConfigError(f"{m} observed edges are too few for fractions {fractions}")
    perm = np.random.default_rng(seed).permutation(observed)
    return EdgeSplit(
        train=perm[:n_train],
        val=perm[n_train:n_train + n_val],
        calib=(),
        test=perm[n_train + n_val:],
        unobserved=np.flatnonzero(~g.observed),
    )


def permute_ct(split: EdgeSplit, calib_fraction: float = 0.5, seed: int = 0) -> EdgeSplit:
    """Draw a fresh random calib/test partition of the ct pool."""
    if not 0.0 < calib_fraction < 1.0:
        raise ConfigError(f"calib_fraction must lie in (0, 1), got {calib_fraction}")
    pool = np.asarray(split.ct, dtype=np.int64)
    if pool.size == 0:
        raise ConfigError("calibration/test pool is empty")
    n_calib = min(pool.size, max(1, int(round(calib_fraction * pool.size))))
    perm = np.random.default_rng(seed).permutation(pool)
    return EdgeSplit(split.train, split.val, perm[:n_calib], perm[n_calib:], split.unobserved)


@dataclass(frozen=True, eq=False)
class MaskedWeightMatrix:
    """Weighted adjacency seen by the encoder.

    ``values[u, v]`` is the observed weight for train edges, ``delta[e]`` for
    every other edge and 0 for non-edges.
    """

    values: np.ndarray
    fill_strategy: FillStrategy
    delta: dict


def build_masked_weights(
    g: Graph, split: EdgeSplit, strategy: FillStrategy = FillStrategy.GLOBAL_MEAN
) -> MaskedWeightMatrix:
    """Assemble the masked weighted adjacency from the train edges only.

    Under ``NEIGHBORHOOD`` an unknown edge ``(u, v)`` gets the mean weight of
    the train edges touching ``u`` or ``v`` (each edge counted once), falling
    back to the global train mean when there are none or their mean is 0.
    """
    strategy = FillStrategy(strategy)
    train = np.asarray(split.train, dtype=np.int64)
    if train.size == 0:
        raise ValidationError("cannot build masked weights from an empty train set")
    w_train = g.weights[train]
    if np.isnan(w_train).any():
        raise ValidationError("train split contains unobserved edges")
    global_mean = float(w_train.mean())
    if global_mean <= 0:
        raise ValidationError("fill value must be positive but the train weights average to 0")

    values = np.zeros((g.n_nodes, g.n_nodes))
    src, dst = g.edges[train, 0], g.edges[train, 1]
    values[src, dst] = w_train

    incident = None
    if strategy is FillStrategy.NEIGHBORHOOD:
        incident = [set() for _ in range(g.n_nodes)]
        for e, u, v in zip(train, src, dst):
            incident[u].add(int(e))
            incident[v].add(int(e))

    is_train = np.zeros(g.n_edges, dtype=bool)
    is_train[train] = True
    delta = {}
    for e in np.flatnonzero(~is_train):
        u, v = g.edges[e]
        d = global_mean
        if incident is not None:
            touching = incident[u] | incident[v]
            if touching:
                local = float(np.mean(g.weights[sorted(touching)]))
                if local > 0:
                    d = local
        delta[int(e)] = d
        values[u, v] = d
    values.flags.writeable = False
    return MaskedWeightMatrix(values=values, fill_strategy=strategy, delta=delta)
