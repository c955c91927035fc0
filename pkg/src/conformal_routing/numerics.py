"""Dense matrix helpers, pinball loss, first-order optimisers and gradient checking.

Matrices are plain ``float64`` numpy arrays.  The wrappers below only add
shape validation with readable errors; hot loops may use ``@`` directly.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping

import numpy as np

from .errors import ConfigError, DimensionError, TrainingDivergenceError


def _as2d(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a, b = _as2d(a, "a"), _as2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a) -> np.ndarray:
    return _as2d(a, "a").T.copy()


def relu(a) -> np.ndarray:
    return np.maximum(np.asarray(a, dtype=float), 0.0)


def hadamard(a, b) -> np.ndarray:
    a, b = _as2d(a, "a"), _as2d(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"elementwise product needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"quantile level must lie in (0, 1), got {alpha}")


def pinball_loss(y, y_hat, alpha: float):
    """Quantile loss ``alpha * (y - y_hat)`` above, ``(1 - alpha) * (y_hat - y)`` below.

    Works elementwise on arrays; always nonnegative.
    """
    _check_alpha(alpha)
    diff = np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)
    out = np.where(diff > 0, alpha * diff, (alpha - 1.0) * diff)
    return float(out) if out.ndim == 0 else out


def pinball_grad(y, y_hat, alpha: float) -> np.ndarray:
    """Derivative of :func:`pinball_loss` with respect to ``y_hat``."""
    diff = np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)
    return np.where(diff > 0, -alpha, 1.0 - alpha)


class ParamSet:
    """Named parameter matrices with same-shaped gradient buffers."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        value = np.array(value, dtype=float)
        if not np.all(np.isfinite(value)):
            raise ConfigError(f"parameter {name} has non-finite entries")
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self):
        return list(self.values)

    def set_grads(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            g = np.asarray(g, dtype=float)
            if g.shape != self.values[name].shape:
                raise DimensionError(
                    f"gradient for {name} has shape {g.shape}, parameter has {self.values[name].shape}"
                )
            self.grads[name] = g.copy()

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, v in self.values.items():
            out.values[name] = v.copy()
            out.grads[name] = self.grads[name].copy()
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: v.copy() for name, v in self.values.items()}

    def n_scalars(self) -> int:
        return sum(v.size for v in self.values.values())


def _check_finite_grads(params: ParamSet):
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(
                f"non-finite gradient in {name}; try a lower learning rate"
            )


def sgd_step(params: ParamSet, lr: float) -> ParamSet:
    """In-place gradient descent step; gradients are zeroed afterwards."""
    _check_finite_grads(params)
    for name, g in params.grads.items():
        params.values[name] -= lr * g
    params.zero_grad()
    return params


class Adam:
    """Adam optimiser state for one :class:`ParamSet`."""

    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet) -> ParamSet:
        _check_finite_grads(params)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in params.grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params.values[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        params.zero_grad()
        return params


def adam_step(params: ParamSet, state: Adam) -> ParamSet:
    return state.step(params)


LossAndGrad = Callable[[ParamSet], "tuple[float, Mapping[str, np.ndarray]]"]


def grad_check(loss_and_grad: LossAndGrad, params: ParamSet, eps: float = 1e-5) -> float:
    """Largest ``|analytic - central difference| / max(1, |central difference|)``.

    ``loss_and_grad(params)`` must return the scalar loss and a mapping of
    analytic gradients keyed like ``params``.  Parameters are perturbed in
    place and restored.
    """
    value, grads = loss_and_grad(params)
    if not math.isfinite(value):
        raise ConfigError("loss is not finite at the check point")
    analytic = {name: np.array(g, dtype=float) for name, g in grads.items()}
    worst = 0.0
    for name in params:
        p = params.values[name]
        flat = p.reshape(-1)
        a = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = loss_and_grad(params)
            flat[i] = orig - eps
            down, _ = loss_and_grad(params)
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            worst = max(worst, abs(a[i] - fd) / max(1.0, abs(fd)))
    return worst
