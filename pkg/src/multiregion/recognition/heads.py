"""Softmax classification heads and the class-specific box regressor."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import DegenerateDataError, InvalidArgumentError, ShapeMismatchError
from ..optim import FeatureScaler, SGDConfig, regression_forward, sgd, softmax_loss, squared_loss

log = logging.getLogger(__name__)

# exp(4.135) ~ 62.5: caps a single refinement step at that size ratio
MAX_LOG_SCALE = float(np.log(1000.0 / 16.0))


def softmax_config(**kw) -> SGDConfig:
    return SGDConfig(**{"lr": 0.001, "momentum": 0.9, "batch_size": 128, "epochs": 40, "lr_step": 30000, **kw})


def regressor_config(**kw) -> SGDConfig:
    return SGDConfig(**{"lr": 0.01, "momentum": 0.9, "batch_size": 128, "epochs": 60, "lr_step": 30000, **kw})


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D descriptor matrix, got shape {x.shape}")
    return x


@dataclass(frozen=True, eq=False)
class LinearHead:
    """Linear scores ``x @ weights.T + bias``; row 0 is background for softmax heads."""

    weights: np.ndarray
    bias: np.ndarray
    final_loss: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        b = np.ascontiguousarray(self.bias, dtype=np.float32).reshape(-1)
        if w.ndim != 2 or b.shape[0] != w.shape[0]:
            raise ShapeMismatchError(f"weights {w.shape} and bias {b.shape} disagree")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_outputs(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights.shape[1]

    def scores(self, x) -> np.ndarray:
        x = _as_matrix(x)
        if x.shape[1] != self.input_dim:
            raise ShapeMismatchError(f"descriptor length {x.shape[1]} != head input {self.input_dim}")
        return x @ self.weights.astype(np.float64).T + self.bias.astype(np.float64)

    def predict(self, x) -> np.ndarray:
        return self.scores(x).argmax(axis=1)


def irreducible_loss(x: np.ndarray, y: np.ndarray) -> float:
    """Lower bound on mean cross-entropy from identical inputs with conflicting labels."""
    _, inverse = np.unique(x, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    total = 0.0
    for g in np.unique(inverse):
        labels = y[inverse == g]
        _, counts = np.unique(labels, return_counts=True)
        if len(counts) > 1:
            p = counts / counts.sum()
            total += -float((counts * np.log(p)).sum())
    return total / len(y)


def train_softmax_head(
    x,
    labels,
    n_outputs: Optional[int] = None,
    config: Optional[SGDConfig] = None,
    seed: int = 0,
    standardize: bool = True,
) -> LinearHead:
    """Multinomial logistic regression by momentum SGD.

    ``labels`` are integers in ``[0, n_outputs)`` with 0 meaning background.
    Weights start at zero, so the result depends only on the data, the
    config and ``seed``.
    """
    config = config or softmax_config()
    x = _as_matrix(x)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(y) != x.shape[0]:
        raise ShapeMismatchError(f"{x.shape[0]} descriptors but {len(y)} labels")
    if len(y) == 0 or len(np.unique(y)) < 2:
        raise DegenerateDataError(
            f"softmax head needs at least two distinct labels, got {np.unique(y).tolist()} over {len(y)} samples"
        )
    n_outputs = int(n_outputs if n_outputs is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= n_outputs:
        raise InvalidArgumentError(f"labels must lie in [0, {n_outputs})")
    scaler = FeatureScaler.fit(x) if standardize else FeatureScaler.identity(x.shape[1])
    xs = scaler.transform(x)
    diagnostics = {}
    floor = irreducible_loss(x, y)
    if floor > 0:
        diagnostics["irreducible_loss"] = floor
        log.warning("identical descriptors carry conflicting labels; loss cannot go below %.6f", floor)
    params = {"W": np.zeros((n_outputs, x.shape[1])), "b": np.zeros(n_outputs)}
    history = sgd(params, lambda p, idx: softmax_loss(p, xs[idx], y[idx], config.weight_decay), len(y), config, seed)
    w, b = scaler.fold(params["W"], params["b"])
    final, _ = softmax_loss(params, xs, y, config.weight_decay)
    diagnostics["epochs"] = len(history)
    return LinearHead(w, b, float(final), diagnostics)


@dataclass(frozen=True, eq=False)
class Regressor:
    """Class-specific box regressor predicting ``(tx, ty, tw, th)`` per class.

    Linear when ``params`` holds ``W, b`` (weights ``(4K, D)``); with one
    rectifier hidden layer when it holds ``W1, b1, W2, b2``.
    """

    params: dict
    n_classes: int
    final_loss: float = float("nan")

    def __post_init__(self):
        p = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.params.items()}
        out = p["W2"].shape[0] if "W2" in p else p["W"].shape[0]
        if out != 4 * self.n_classes:
            raise ShapeMismatchError(f"regressor emits {out} values, expected 4 x {self.n_classes}")
        object.__setattr__(self, "params", p)

    @classmethod
    def zeros(cls, n_classes: int, dim: int) -> "Regressor":
        return cls({"W": np.zeros((4 * n_classes, dim)), "b": np.zeros(4 * n_classes)}, n_classes)

    @property
    def hidden(self) -> int:
        return self.params["W1"].shape[0] if "W1" in self.params else 0

    @property
    def weights(self) -> np.ndarray:
        return self.params["W1" if self.hidden else "W"]

    @property
    def bias(self) -> np.ndarray:
        return self.params["b2" if self.hidden else "b"]

    @property
    def input_dim(self) -> int:
        return self.weights.shape[1]

    def predict(self, x) -> np.ndarray:
        """Targets of shape ``(n, n_classes, 4)``."""
        x = _as_matrix(x)
        if x.shape[1] != self.input_dim:
            raise ShapeMismatchError(f"descriptor length {x.shape[1]} != regressor input {self.input_dim}")
        p64 = {k: v.astype(np.float64) for k, v in self.params.items()}
        out, _ = regression_forward(p64, x)
        return out.reshape(x.shape[0], self.n_classes, 4)


def train_regressor(
    x,
    targets,
    classes,
    n_classes: int,
    config: Optional[SGDConfig] = None,
    seed: int = 0,
    hidden: int = 0,
    standardize: bool = True,
) -> Regressor:
    """Squared-error regression of targets for each sample's own class.

    ``classes`` are ids in ``[0, n_classes)``; only the four outputs of the
    sample's class enter the loss.
    """
    config = config or regressor_config()
    x = _as_matrix(x)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    c = np.asarray(classes, dtype=np.int64).reshape(-1)
    n, d = x.shape
    if n == 0:
        raise DegenerateDataError("no regression samples")
    if len(t) != n or len(c) != n:
        raise ShapeMismatchError(f"{n} descriptors, {len(t)} targets, {len(c)} class ids")
    if c.min() < 0 or c.max() >= n_classes:
        raise InvalidArgumentError(f"class ids must lie in [0, {n_classes})")
    full_t = np.zeros((n, 4 * n_classes))
    mask = np.zeros((n, 4 * n_classes))
    cols = 4 * c[:, None] + np.arange(4)
    full_t[np.arange(n)[:, None], cols] = t
    mask[np.arange(n)[:, None], cols] = 1.0
    scaler = FeatureScaler.fit(x) if standardize else FeatureScaler.identity(d)
    xs = scaler.transform(x)
    m = 4 * n_classes
    if hidden:
        rng = np.random.default_rng(seed)
        params = {
            "W1": rng.normal(0.0, np.sqrt(2.0 / d), (hidden, d)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0.0, np.sqrt(1.0 / hidden), (m, hidden)) * 0.1,
            "b2": np.zeros(m),
        }
    else:
        params = {"W": np.zeros((m, d)), "b": np.zeros(m)}

    def loss_fn(p, idx):
        return squared_loss(p, xs[idx], full_t[idx], mask[idx], config.weight_decay)

    sgd(params, loss_fn, n, config, seed)
    final, _ = squared_loss(params, xs, full_t, mask, config.weight_decay)
    key_w, key_b = ("W1", "b1") if hidden else ("W", "b")
    params[key_w], params[key_b] = scaler.fold(params[key_w], params[key_b])
    return Regressor(params, n_classes, float(final))
