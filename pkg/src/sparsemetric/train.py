"""Mini-batch training of metric weights over frozen paired features."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .evaluation import evaluate
from .losses import LossSpec, batch_loss_and_grad, loss_value
from .metric import MetricConfig, MetricParams, Variant, init_identity, init_random, score_matrix
from .prng import PCG32

log = logging.getLogger(__name__)

CLIP_NORM = 10.0
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


class NumericError(FloatingPointError):
    """A non-finite value reached the optimizer."""


@dataclass
class TrainConfig:
    loss: LossSpec = field(default_factory=LossSpec)
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 5e-4
    optimizer: Optimizer = Optimizer.ADAM
    weight_decay: float = 0.0
    weight_dropout: float = 0.0
    seed: int = 0
    eval_every: int = 0
    init: str = "identity"
    clip_norm: float = CLIP_NORM

    def __post_init__(self):
        self.optimizer = Optimizer(self.optimizer)
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0.0 <= self.weight_dropout < 1.0:
            raise ValueError("weight_dropout must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.init not in ("identity", "random"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class TrainState:
    params: MetricParams
    m: np.ndarray
    v: np.ndarray
    rng: PCG32
    step: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params: MetricParams, rng: PCG32) -> "TrainState":
        z = np.zeros_like(params.weights)
        return cls(params, z, z.copy(), rng)


def sample_batch(X, Y, batch_size: int, rng: PCG32):
    """Draw ``batch_size`` distinct pairs; returns ``(X_b, Y_b, indices)``."""
    n = len(X)
    if len(Y) != n:
        raise ValueError("paired feature sets differ in length")
    if batch_size > n:
        raise ValueError(f"batch of {batch_size} exceeds dataset of {n} pairs")
    idx = np.asarray(rng.permutation_prefix(n, batch_size), dtype=np.int64)
    return X[idx], Y[idx], idx


def epoch_batches(n: int, batch_size: int, rng: PCG32) -> list:
    """Shuffle all indices and cut them into batches; a final batch of one is dropped."""
    perm = np.asarray(rng.permutation_prefix(n, n), dtype=np.int64)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def weight_dropout_mask(params: MetricParams, p: float, rng: PCG32) -> np.ndarray:
    """Inverted-dropout multipliers for the stored weights: 0 or 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    shape = params.weights.shape
    if p == 0.0:
        return np.ones(shape, dtype=params.weights.dtype)
    u = rng.u32_array(params.weights.size).astype(np.float64) * 2.0 ** -32
    keep = (u >= p).reshape(shape)
    return (keep / (1.0 - p)).astype(params.weights.dtype)


def apply_update(state: TrainState, grad: np.ndarray, config: TrainConfig) -> TrainState:
    """One first-order step on the masked storage, in place."""
    grad = np.asarray(grad, dtype=state.params.weights.dtype)
    if grad.shape != state.params.weights.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match weights {state.params.weights.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient at step {state.step}; update rejected")
    w = state.params.weights
    lr = config.learning_rate
    lam = config.weight_decay
    dtype = w.dtype
    if config.optimizer is Optimizer.SGD:
        w -= (lr * (grad + lam * w)).astype(dtype)
    else:
        t = state.step + 1
        state.m = (BETA1 * state.m + (1 - BETA1) * grad).astype(dtype)
        state.v = (BETA2 * state.v + (1 - BETA2) * grad * grad).astype(dtype)
        mhat = state.m / (1 - BETA1 ** t)
        vhat = state.v / (1 - BETA2 ** t)
        # decoupled decay
        w -= (lr * (mhat / (np.sqrt(vhat) + ADAM_EPS) + lam * w)).astype(dtype)
    state.step += 1
    return state


def _clip(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if max_norm and norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def dataset_loss(X, Y, params: MetricParams, spec: LossSpec, batch_size: int) -> float:
    """Mean loss over consecutive index-ordered batches, no shuffling."""
    losses = []
    n = len(X)
    for i in range(0, n, batch_size):
        if n - i < 2:
            break
        losses.append(loss_value(score_matrix(X[i:i + batch_size], Y[i:i + batch_size], params), spec))
    return float(np.mean(losses))


@dataclass
class TrainResult:
    params: MetricParams
    history: list
    reports: list


def train(X, Y, metric: MetricConfig, config: TrainConfig, eval_set=None, dtype=np.float32) -> TrainResult:
    """Fit the metric from identity (or random) initialization.

    ``history[0]`` is the loss before any update; ``history[e]`` is the mean
    batch loss seen during epoch ``e``. When ``eval_set = (Xq, Yg, gt)`` is
    given and ``eval_every > 0``, a report is appended before training and
    after every ``eval_every`` epochs as ``(epoch, RetrievalReport)``.
    """
    X = np.asarray(X, dtype=dtype)
    Y = np.asarray(Y, dtype=dtype)
    rng = PCG32(config.seed)
    if config.init == "random":
        params = init_random(metric, PCG32(config.seed ^ 0x5EED), dtype=dtype)
    else:
        params = init_identity(metric, dtype)
    state = TrainState.fresh(params, rng)
    spec = config.loss
    bs = min(config.batch_size, len(X))
    state.history.append(dataset_loss(X, Y, state.params, spec, bs))
    reports = []

    def _maybe_eval(epoch):
        if eval_set is not None and config.eval_every > 0 and epoch % config.eval_every == 0:
            Xq, Yg, gt = eval_set
            reports.append((epoch, evaluate(score_matrix(Xq, Yg, state.params), gt)))

    _maybe_eval(0)
    trainable = metric.variant is not Variant.COSINE
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in epoch_batches(len(X), bs, state.rng):
            xb, yb = X[idx], Y[idx]
            if trainable and config.weight_dropout > 0:
                keep = weight_dropout_mask(state.params, config.weight_dropout, state.rng)
                dropped = MetricParams(metric, state.params.weights * keep)
                loss, grad = batch_loss_and_grad(xb, yb, dropped, spec)
                grad = grad * keep
            else:
                loss, grad = batch_loss_and_grad(xb, yb, state.params, spec)
            losses.append(loss)
            if trainable:
                apply_update(state, _clip(grad, config.clip_norm), config)
        state.history.append(float(np.mean(losses)))
        log.info("epoch %d loss %.6f", epoch, state.history[-1])
        _maybe_eval(epoch)
    return TrainResult(state.params, state.history, reports)
