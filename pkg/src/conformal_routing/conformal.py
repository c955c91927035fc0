"""Prediction intervals for edge weights: Basic, QR, CQR and width-reweighted CQR."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError
from .model import EdgePrediction

#: Floor on the quantile-interval width used by the reweighted scores.
WIDTH_FLOOR = 1e-6


class Method(str, enum.Enum):
    BASIC = "Basic"
    QR = "QR"
    CQR = "CQR"
    CQR_ERC = "CQR_ERC"

    @classmethod
    def parse(cls, text) -> "Method":
        if isinstance(text, cls):
            return text
        key = str(text).strip().upper().replace("-", "_")
        for m in cls:
            if m.name == key:
                return m
        raise ConfigError(f"unknown method {text!r}; expected one of {[m.value for m in cls]}")


@dataclass(frozen=True, eq=False)
class IntervalSet:
    """Per-edge ``[lo, hi]`` intervals produced by one method."""

    method: Method
    edges: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    alpha: float | None = None
    q: float | None = None
    lam: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        for name, dtype in (("edges", np.int64), ("lo", float), ("hi", float)):
            a = np.array(getattr(self, name), dtype=dtype).reshape(-1)
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        if not (self.edges.size == self.lo.size == self.hi.size):
            raise ValidationError("intervals need one (lo, hi) per edge")
        if np.any(self.lo > self.hi):
            raise ValidationError("interval with lo > hi")
        if self.q is not None and math.isnan(self.q):
            raise ValidationError("calibration correction is NaN")

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def __len__(self):
        return int(self.edges.size)

    def take(self, edges) -> "IntervalSet":
        lookup = {int(e): i for i, e in enumerate(self.edges)}
        try:
            idx = np.asarray([lookup[int(e)] for e in edges], dtype=np.int64)
        except KeyError as exc:
            raise ValidationError(f"no interval for edge {exc.args[0]}") from None
        return IntervalSet(self.method, self.edges[idx], self.lo[idx], self.hi[idx], self.alpha, self.q, self.lam)

    def to_csv(self, path, graph, true_weights=None) -> Path:
        """Write ``edge_src, edge_dst, lo, hi, method, alpha`` rows.

        When ``true_weights`` (indexed by edge) is given, ``true_w`` and
        ``covered`` columns are appended.
        """
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            header = ["edge", "edge_src", "edge_dst", "lo", "hi", "method", "alpha"]
            if true_weights is not None:
                header += ["true_w", "covered"]
            w.writerow(header)
            for e, lo, hi in zip(self.edges, self.lo, self.hi):
                u, v = graph.edges[e]
                row = [int(e), graph.node_ids[u], graph.node_ids[v], repr(float(lo)), repr(float(hi)),
                       self.method.value, "" if self.alpha is None else repr(self.alpha)]
                if true_weights is not None:
                    t = float(true_weights[e])
                    row += [repr(t), int(lo <= t <= hi)]
                w.writerow(row)
        return path


def _calib_arrays(pred: EdgePrediction, edges, weights):
    sub = pred.take(edges)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if weights.size != len(sub):
        raise ValidationError(f"{weights.size} calibration weights for {len(sub)} edges")
    if np.isnan(weights).any():
        raise ValidationError("calibration weights must be observed")
    return sub, weights


def cqr_scores(pred: EdgePrediction, edges, weights) -> np.ndarray:
    """Signed distance of each calibration weight outside its ``[lo, hi]``."""
    sub, w = _calib_arrays(pred, edges, weights)
    return np.maximum(sub.lo - w, w - sub.hi)


def conformal_quantile(scores, alpha: float) -> float:
    """The ``ceil((n + 1)(1 - alpha))``-th smallest score, or ``inf`` past ``n``."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if scores.size == 0:
        raise ValidationError("no calibration scores")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("calibration scores must be finite")
    n = scores.size
    # (n + 1)(1 - alpha) in floating point can land a hair above an integer
    k = math.ceil(round((n + 1) * (1.0 - alpha), 9))
    if k > n:
        return math.inf
    return float(np.sort(scores, kind="stable")[max(k, 1) - 1])


def _uncross(lo, hi):
    """A negative correction can invert narrow intervals; collapse those to their midpoint."""
    with np.errstate(invalid="ignore"):  # -inf + inf on unbounded intervals, never selected
        mid = 0.5 * (lo + hi)
    crossed = lo > hi
    return np.where(crossed, mid, lo), np.where(crossed, mid, hi)


def cqr_intervals(pred: EdgePrediction, q: float, edges, alpha=None) -> IntervalSet:
    sub = pred.take(edges)
    lo, hi = _uncross(sub.lo - q, sub.hi + q)
    return IntervalSet(Method.CQR, sub.edges, lo, hi, alpha=alpha, q=float(q))


def _widths(sub: EdgePrediction) -> np.ndarray:
    return np.maximum(np.abs(sub.hi - sub.lo), WIDTH_FLOOR)


def erc_scores(pred: EdgePrediction, edges, weights) -> np.ndarray:
    """CQR scores divided by the (floored) quantile-interval width."""
    sub, w = _calib_arrays(pred, edges, weights)
    return np.maximum(sub.lo - w, w - sub.hi) / _widths(sub)


def erc_intervals(pred: EdgePrediction, q: float, edges, alpha=None) -> IntervalSet:
    sub = pred.take(edges)
    u = _widths(sub)
    if math.isinf(q):
        lo = np.full(len(sub), -math.inf)
        hi = np.full(len(sub), math.inf)
    else:
        lo, hi = _uncross(sub.lo - q * u, sub.hi + q * u)
    return IntervalSet(Method.CQR_ERC, sub.edges, lo, hi, alpha=alpha, q=float(q))


def qr_intervals(pred: EdgePrediction, edges, alpha=None) -> IntervalSet:
    sub = pred.take(edges)
    return IntervalSet(Method.QR, sub.edges, sub.lo, sub.hi, alpha=alpha)


def basic_intervals(train_weights, lam: float | None, edges, alpha=None) -> IntervalSet:
    """The same interval on every edge, built from train-weight statistics.

    ``lam`` scales ``[mean + lam (min - mean), mean + lam (max - mean)]``;
    ``lam=None`` selects the fixed ``[0, mean]`` interval instead.
    """
    w = np.asarray(train_weights, dtype=float).reshape(-1)
    if w.size == 0:
        raise ValidationError("no train weights")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1)
    mean = float(w.mean())
    if lam is None:
        lo, hi = 0.0, mean
    else:
        if lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {lam}")
        lo = mean + lam * (float(w.min()) - mean)
        hi = mean + lam * (float(w.max()) - mean)
    return IntervalSet(
        Method.BASIC, edges, np.full(edges.size, lo), np.full(edges.size, hi), alpha=alpha, lam=lam
    )


def calibrate(method, pred: EdgePrediction, calib_edges, calib_weights, test_edges,
              alpha: float, train_weights=None, lam: float | None = None) -> IntervalSet:
    """Build intervals on ``test_edges`` for any :class:`Method`."""
    method = Method.parse(method)
    if method is Method.BASIC:
        if train_weights is None:
            raise ConfigError("Basic intervals need the train weights")
        return basic_intervals(train_weights, lam, test_edges, alpha=alpha)
    if method is Method.QR:
        return qr_intervals(pred, test_edges, alpha=alpha)
    if method is Method.CQR:
        q = conformal_quantile(cqr_scores(pred, calib_edges, calib_weights), alpha)
        return cqr_intervals(pred, q, test_edges, alpha=alpha)
    q = conformal_quantile(erc_scores(pred, calib_edges, calib_weights), alpha)
    return erc_intervals(pred, q, test_edges, alpha=alpha)
