"""RMSProp with a geometric per-epoch learning-rate decay and a floor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


@dataclass
class RMSPropConfig:
    lr: float = 0.001
    lr_decay: float = 0.05
    lr_floor: float = 1e-5
    beta: float = 0.9
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if not 0 <= self.lr_decay < 1:
            raise ConfigError(f"lr_decay must lie in [0, 1), got {self.lr_decay}")
        if self.lr <= 0 or self.lr_floor < 0 or self.lr_floor > self.lr:
            raise ConfigError(f"need 0 <= lr_floor <= lr, lr > 0 (lr={self.lr}, floor={self.lr_floor})")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")


class RMSProp:
    """Per-parameter RMSProp.

    ``E <- beta * E + (1 - beta) * g**2``;  ``w <- w - lr * g / (sqrt(E) + eps)``.
    Accumulators are created lazily (zeros) the first time a parameter name is seen.
    """

    def __init__(self, config: RMSPropConfig | None = None):
        self.config = config or RMSPropConfig()
        self.lr = self.config.lr
        self.sq_avg = {}

    def step(self, params: dict, grads: dict) -> dict:
        """Update ``params`` in place from ``grads`` (both keyed by parameter name)."""
        beta, eps = self.config.beta, self.config.epsilon
        for name, w in params.items():
            g = grads[name]
            if g.shape != w.shape:
                raise ShapeError(f"{name}: grad {g.shape} vs param {w.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
            acc = self.sq_avg.get(name)
            if acc is None:
                acc = self.sq_avg[name] = np.zeros_like(w)
            elif acc.shape != w.shape:
                raise ShapeError(f"{name}: accumulator {acc.shape} vs param {w.shape}")
            acc *= beta
            acc += (1 - beta) * g * g
            w -= self.lr * g / (np.sqrt(acc) + eps)
        return params

    def decay_learning_rate(self, epoch_completed: int | None = None) -> float:
        """Apply one epoch of decay: ``lr <- max(floor, lr * (1 - decay))``."""
        self.lr = max(self.config.lr_floor, self.lr * (1.0 - self.config.lr_decay))
        return self.lr

    def reset(self) -> None:
        self.lr = self.config.lr
        self.sq_avg.clear()


def rmsprop_step(params: dict, grads: dict, state: RMSProp) -> dict:
    return state.step(params, grads)


def decay_learning_rate(state: RMSProp, epoch_completed: int | None = None) -> RMSProp:
    state.decay_learning_rate(epoch_completed)
    return state


def epochs_to_floor(config: RMSPropConfig) -> int:
    """Number of decay steps until the learning rate first sits on its floor."""
    opt = RMSProp(config)
    epochs = 0
    while opt.lr > config.lr_floor:
        opt.decay_learning_rate()
        epochs += 1
        if config.lr_decay == 0:
            raise ConfigError("learning rate never decays with lr_decay = 0")
    return epochs
