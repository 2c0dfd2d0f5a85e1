"""Losses with analytic gradients, momentum SGD, and feature standardization.

Every loss returns ``(loss, grads)`` where ``grads`` mirrors the parameter
dict. Losses are means over the minibatch plus an optional L2 term
``0.5 * weight_decay * ||W||^2`` on weight matrices (biases are not decayed).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


def _l2(params: dict, weight_decay: float, keys=("W", "W1", "W2")):
    loss = 0.0
    grads = {}
    if weight_decay:
        for k in keys:
            if k in params:
                loss += 0.5 * weight_decay * float(np.sum(params[k] ** 2))
                grads[k] = weight_decay * params[k]
    return loss, grads


def softmax_loss(params: dict, x: np.ndarray, y: np.ndarray, weight_decay: float = 0.0):
    """Multinomial logistic loss for a linear model ``x @ W.T + b``; ``y`` holds integer labels."""
    w, b = params["W"], params["b"]
    n = x.shape[0]
    logits = x @ w.T + b
    logits = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    z = expl.sum(axis=1, keepdims=True)
    logp = logits - np.log(z)
    loss = -float(logp[np.arange(n), y].mean())
    d = expl / z
    d[np.arange(n), y] -= 1.0
    d /= n
    grads = {"W": d.T @ x, "b": d.sum(axis=0)}
    reg, rgrads = _l2(params, weight_decay)
    for k, g in rgrads.items():
        grads[k] = grads[k] + g
    return loss + reg, grads


def logistic_loss(params: dict, x: np.ndarray, y: np.ndarray, weight_decay: float = 0.0):
    """Independent binary logistic losses, one per output column.

    ``y`` is ``(n, K)`` in {0, 1}; the loss is averaged over samples and
    summed over outputs.
    """
    w, b = params["W"], params["b"]
    n = x.shape[0]
    z = x @ w.T + b
    # log(1 + exp(-|z|)) formulation keeps large |z| finite
    loss = float((np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).sum() / n)
    d = (sigmoid(z) - y) / n
    grads = {"W": d.T @ x, "b": d.sum(axis=0)}
    reg, rgrads = _l2(params, weight_decay)
    for k, g in rgrads.items():
        grads[k] = grads[k] + g
    return loss + reg, grads


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def regression_forward(params: dict, x: np.ndarray):
    """Outputs of the box regressor, linear or with one ReLU hidden layer."""
    if "W1" in params:
        pre = x @ params["W1"].T + params["b1"]
        hidden = np.maximum(pre, 0.0)
        return hidden @ params["W2"].T + params["b2"], (pre, hidden)
    return x @ params["W"].T + params["b"], None


def squared_loss(params: dict, x: np.ndarray, t: np.ndarray, mask: np.ndarray, weight_decay: float = 0.0):
    """``0.5 * ||pred - t||^2`` over the unmasked outputs, averaged over samples.

    ``t`` and ``mask`` have the shape of the prediction ``(n, M)``; masked-out
    entries (other classes' rows) contribute nothing.
    """
    n = x.shape[0]
    pred, cache = regression_forward(params, x)
    r = (pred - t) * mask
    loss = 0.5 * float((r * r).sum()) / n
    d = r / n
    if cache is None:
        grads = {"W": d.T @ x, "b": d.sum(axis=0)}
    else:
        pre, hidden = cache
        grads = {"W2": d.T @ hidden, "b2": d.sum(axis=0)}
        dh = (d @ params["W2"]) * (pre > 0)
        grads["W1"] = dh.T @ x
        grads["b1"] = dh.sum(axis=0)
    reg, rgrads = _l2(params, weight_decay)
    for k, g in rgrads.items():
        grads[k] = grads[k] + g
    return loss + reg, grads


@dataclass
class SGDConfig:
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 30
    lr_step: int = 30000  # iterations between x0.1 decays
    lr_decay: float = 0.1
    weight_decay: float = 0.0


def sgd(
    params: dict,
    loss_fn: Callable[[dict, np.ndarray], tuple],
    n: int,
    config: SGDConfig,
    seed: int,
) -> list[float]:
    """Minibatch SGD with momentum, updating ``params`` in place.

    ``loss_fn(params, idx)`` evaluates the loss on the rows ``idx``. Returns
    the mean loss of each epoch. Batch order comes from a generator seeded
    with ``seed`` so runs are reproducible.
    """
    rng = np.random.default_rng(seed)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    history = []
    it = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            lr = config.lr * config.lr_decay ** (it // config.lr_step)
            loss, grads = loss_fn(params, idx)
            for k, g in grads.items():
                velocity[k] *= config.momentum
                velocity[k] -= lr * g
                params[k] += velocity[k]
            total += loss * len(idx)
            seen += len(idx)
            it += 1
        history.append(total / max(seen, 1))
    return history


@dataclass(frozen=True, eq=False)
class FeatureScaler:
    """Per-column standardization; constant columns keep scale 1."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "FeatureScaler":
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std[std < 1e-12] = 1.0
        return cls(mean, std)

    @classmethod
    def identity(cls, dim: int) -> "FeatureScaler":
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def fold(self, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Weights acting on raw features that equal ``w, b`` acting on standardized ones."""
        w_raw = w / self.scale
        return w_raw, b - w_raw @ self.mean
