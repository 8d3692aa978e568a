"""Adam, the mini-batch training loop, and reduce-on-plateau learning-rate control."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .densenet import Model, model_forward
from .errors import InvalidArgumentError, NumericInstabilityError
from .loss import ClassWeights, plain_bce, weighted_bce

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[T.Tensor], **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[T.Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for p, g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericInstabilityError(f"non-finite gradient for parameter {p.name}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise InvalidArgumentError(f"gradient shape {g.shape} does not match {p.name} {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 20
    initial_lr: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_patience: int = 1
    min_lr: float = 1e-5
    seed: int = 0
    weighted_loss: bool = True

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidArgumentError("batch_size and epochs must be positive")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise InvalidArgumentError("lr_decay_factor must be in (0, 1)")
        if self.lr_patience < 0:
            raise InvalidArgumentError("lr_patience must be non-negative")
        if not 0.0 < self.min_lr <= self.initial_lr:
            raise InvalidArgumentError("need 0 < min_lr <= initial_lr")


def batch_slices(n: int, batch_size: int) -> list[slice]:
    return [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def train_epoch(model: Model, images: np.ndarray, labels: np.ndarray,
                weights: ClassWeights | None, config: TrainConfig, state: AdamState,
                epoch: int, lr: float) -> float:
    """Shuffle, then forward/loss/backward/Adam over every batch; return the mean batch loss.

    The shuffle order and dropout masks come from a generator seeded by
    (config.seed, epoch). ``weights=None`` trains with the unweighted loss.
    """
    n = len(images)
    if n == 0:
        raise InvalidArgumentError("cannot train on an empty dataset")
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(n)
    params = model.parameters()
    model.train()
    losses = []
    for sl in batch_slices(n, config.batch_size):
        idx = order[sl]
        with T.graph_context():
            model.zero_grad()
            probs = model_forward(model, T.Tensor(images[idx]), rng=rng)
            if weights is None:
                loss = plain_bce(probs, labels[idx])
            else:
                loss = weighted_bce(probs, labels[idx], weights)
            T.backward(loss)
        adam_step(params, [p.grad for p in params], state, lr)
        losses.append(float(loss.data))
    return float(np.mean(losses))


def lr_schedule_update(history: Sequence[float], current_lr: float, config: TrainConfig) -> float:
    """Decay the rate once the latest epochs have plateaued for more than ``lr_patience`` epochs.

    An epoch counts as an improvement when its loss is below the best earlier
    loss by more than a relative 1e-3.
    """
    if not history:
        raise InvalidArgumentError("learning-rate schedule needs at least one epoch loss")
    best = history[0]
    stale = 0
    for loss in history[1:]:
        if loss < best * (1.0 - 1e-3):
            best = loss
            stale = 0
        else:
            stale += 1
    if stale > config.lr_patience:
        return max(current_lr * config.lr_decay_factor, config.min_lr)
    return current_lr


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    wall_seconds: float


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.mean_loss for r in self.history]

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "lr", "wall_seconds"])
        for r in self.history:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.lr), f"{r.wall_seconds:.3f}"])
        return buf.getvalue()


def fit(model: Model, images: np.ndarray, labels: np.ndarray, weights: ClassWeights | None,
        config: TrainConfig, on_epoch: Callable[[EpochRecord, Model], None] | None = None) -> TrainResult:
    """Train for ``config.epochs`` epochs; ``lr`` used for an epoch is the one logged with it."""
    config.validate()
    state = AdamState.zeros_like(model.parameters())
    lr = config.initial_lr
    result = TrainResult()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        loss = train_epoch(model, images, labels, weights, config, state, epoch, lr)
        rec = EpochRecord(epoch, loss, lr, time.perf_counter() - t0)
        result.history.append(rec)
        log.info("epoch %d loss %.5f lr %.2e (%.1fs)", epoch, loss, lr, rec.wall_seconds)
        if on_epoch is not None:
            on_epoch(rec, model)
        lr = lr_schedule_update(result.losses, lr, config)
    return result
