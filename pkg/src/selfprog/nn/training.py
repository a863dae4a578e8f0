"""Optimizers and the minibatch training loop."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .layers import Module, Param


class DivergenceError(RuntimeError):
    pass


class DeadlineExceeded(RuntimeError):
    pass


class TrainData(Protocol):
    def __len__(self) -> int: ...

    def batch(self, indices: np.ndarray): ...


@dataclass
class ArrayData:
    """Image classification data: NHWC float images and integer labels."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def batch(self, indices):
        return self.x[indices], self.y[indices]


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr and batch_size must be positive, epochs non-negative")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    accuracy: Optional[float] = None

    @property
    def steps(self) -> int:
        return len(self.step_losses)

    @property
    def avg_loss(self) -> Optional[float]:
        if not self.step_losses:
            return None
        return math.fsum(self.step_losses) / len(self.step_losses)


class Adam:
    def __init__(self, params: Sequence[Param], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step = self.lr * math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.value -= step * m / (np.sqrt(v) + self.eps)


class SGD:
    def __init__(self, params: Sequence[Param], lr: float = 1e-2):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            p.value -= self.lr * p.grad


OPTIMIZERS = {"adam": Adam, "sgd": SGD}


def train(
    model: Module,
    data: TrainData,
    config: TrainConfig,
    *,
    deadline: Optional[float] = None,
) -> TrainReport:
    """Minibatch training for ``config.epochs`` epochs, shuffled by ``config.seed``.

    ``model`` must expose ``loss_and_grad(batch) -> float``.  ``deadline`` is a
    ``time.monotonic()`` value checked before every step.
    """
    report = TrainReport()
    n = len(data)
    if config.epochs == 0:
        return report
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    params = model.params()
    opt = OPTIMIZERS[config.optimizer](params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch = []
        for start in range(0, n, config.batch_size):
            if deadline is not None and time.monotonic() > deadline:
                raise DeadlineExceeded("training exceeded its wall-clock budget")
            for p in params:
                p.grad[...] = 0
            loss = model.loss_and_grad(data.batch(order[start:start + config.batch_size]))
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at step {report.steps + 1}")
            opt.step()
            epoch.append(loss)
            report.step_losses.append(loss)
        report.epoch_losses.append(math.fsum(epoch) / len(epoch))
    return report


def accuracy(model, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("accuracy over zero samples is undefined")
    return float((model.predict(x) == y).mean())
