"""Linear hinge-loss classifier with hard negative mining."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .._kernels import svm_dual_cd
from ..errors import DegenerateDataError, ShapeMismatchError

VIOLATION_SCORE = -1.0


@dataclass
class SVMConfig:
    """``c`` weighs the summed hinge loss against ``0.5 * ||w||^2``.

    The bias is learned as the weight of a constant feature equal to
    ``bias_scale`` and is therefore regularized too, which keeps the
    optimum unique.
    """

    c: float = 1.0
    max_rounds: int = 10
    initial_negatives: int = 1000
    tol: float = 1e-6
    max_epochs: int = 5000
    bias_scale: float = 1.0


@dataclass(frozen=True, eq=False)
class LinearSVM:
    weights: np.ndarray
    bias: float
    converged: bool = True
    epochs: int = 0

    def scores(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.bias


@dataclass(frozen=True, eq=False)
class MiningResult:
    svm: LinearSVM
    rounds: int
    active: np.ndarray  # sorted pool indices in the final training set
    converged: bool  # True when the last round found no new violators
    history: list = field(default_factory=list)  # training-set size per round

    @property
    def weights(self) -> np.ndarray:
        return self.svm.weights

    @property
    def bias(self) -> float:
        return self.svm.bias


def train_linear_svm(x, y, config: Optional[SVMConfig] = None) -> LinearSVM:
    """Solve the L2-regularized hinge-loss problem by dual coordinate descent."""
    config = config or SVMConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != len(y):
        raise ShapeMismatchError(f"samples {x.shape} and labels {y.shape} disagree")
    if len(y) == 0:
        raise DegenerateDataError("no training samples")
    aug = np.empty((x.shape[0], x.shape[1] + 1))
    aug[:, :-1] = x
    aug[:, -1] = config.bias_scale
    w, _, epochs, converged = svm_dual_cd(aug, y, float(config.c), float(config.tol), int(config.max_epochs))
    return LinearSVM(w[:-1].copy(), float(w[-1] * config.bias_scale), bool(converged), int(epochs))


def hinge_objective(svm: LinearSVM, x, y, c: float, bias_scale: float = 1.0) -> float:
    y = np.asarray(y, dtype=np.float64)
    margins = np.maximum(0.0, 1.0 - y * svm.scores(x))
    wb = svm.bias / bias_scale
    return 0.5 * float(svm.weights @ svm.weights + wb * wb) + c * float(margins.sum())


def train_svm_hard_negative(
    positives,
    pool,
    config: Optional[SVMConfig] = None,
    initial=None,
    seed: int = 0,
) -> MiningResult:
    """Alternate training with adding pool negatives that score above -1.

    ``initial`` selects the pool indices of the first training set; by
    default a seeded random subset of ``config.initial_negatives``. Stops
    when a round adds nothing or after ``config.max_rounds`` rounds. An
    empty pool trains once on the positives alone.
    """
    config = config or SVMConfig()
    pos = np.asarray(positives, dtype=np.float64)
    if pos.ndim != 2 or len(pos) == 0:
        raise DegenerateDataError("hard negative mining needs at least one positive")
    pool = np.asarray(pool, dtype=np.float64).reshape(-1, pos.shape[1])
    n_pool = len(pool)
    if n_pool == 0:
        svm = train_linear_svm(pos, np.ones(len(pos)), config)
        return MiningResult(svm, 1, np.zeros(0, np.int64), True, [len(pos)])
    if initial is None:
        k = min(config.initial_negatives, n_pool)
        initial = np.random.default_rng(seed).permutation(n_pool)[:k]
    active = np.zeros(n_pool, bool)
    active[np.asarray(initial, dtype=np.int64)] = True
    history = []
    converged = False
    rounds = 0
    svm = None
    while rounds < config.max_rounds:
        rounds += 1
        idx = np.flatnonzero(active)
        x = np.vstack([pos, pool[idx]])
        y = np.concatenate([np.ones(len(pos)), -np.ones(len(idx))])
        svm = train_linear_svm(x, y, config)
        history.append(len(y))
        new = (~active) & (svm.scores(pool) > VIOLATION_SCORE)
        if not new.any():
            converged = True
            break
        active |= new
    return MiningResult(svm, rounds, np.flatnonzero(active), converged, history)
