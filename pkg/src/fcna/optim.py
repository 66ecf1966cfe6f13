"""SGD with momentum and weight decay, plus the validation-plateau schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import ShapeError

CONTINUE = "continue"
DROPPED_LR = "dropped_lr"
STOP = "stop"


@dataclass
class OptimConfig:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_factor: float = 10.0
    patience: int = 3  # validation evals without improvement before a drop
    min_delta: float = 1e-4
    max_drops: int = 3

    def __post_init__(self):
        if self.learning_rate <= 0 or self.lr_drop_factor <= 1:
            raise ValueError("learning_rate must be > 0 and lr_drop_factor > 1")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be >= 0")
        if self.patience < 1 or self.max_drops < 0 or self.min_delta < 0:
            raise ValueError("patience >= 1, max_drops >= 0, min_delta >= 0")


@dataclass
class OptimState:
    velocity: dict[str, np.ndarray]
    current_lr: float
    drops_taken: int = 0
    best_validation_loss: float | None = None
    evals_since_improvement: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray],
                   cfg: OptimConfig) -> "OptimState":
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(velocity=velocity, current_lr=cfg.learning_rate)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: OptimState, cfg: OptimConfig) -> None:
    """v <- momentum*v - lr*(grad + wd*param); param <- param + v. In place."""
    if set(params) != set(grads):
        raise ShapeError(
            f"param/grad name mismatch: {sorted(set(params) ^ set(grads))}")
    lr = np.float32(state.current_lr)
    mom = np.float32(cfg.momentum)
    wd = np.float32(cfg.weight_decay)
    for name in params:
        p, g, v = params[name], grads[name], state.velocity[name]
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(
                f"{name}: shapes disagree (param {p.shape}, grad {g.shape}, "
                f"velocity {v.shape})")
        v *= mom
        v -= lr * (g + wd * p)
        p += v


def plateau_update(state: OptimState, cfg: OptimConfig,
                   validation_loss: float) -> str:
    """Track the best validation loss and manage learning-rate drops.

    The first evaluation sets the baseline. After `patience` consecutive
    evaluations improving by less than min_delta, the learning rate is
    divided by lr_drop_factor and the counter resets; once max_drops drops
    have been spent, the next would-be drop signals STOP instead.
    """
    if not math.isfinite(validation_loss):
        raise FloatingPointError(
            f"validation loss is not finite ({validation_loss}); training diverged")
    improved = (state.best_validation_loss is None
                or state.best_validation_loss - validation_loss >= cfg.min_delta)
    if improved:
        state.best_validation_loss = validation_loss
        state.evals_since_improvement = 0
        return CONTINUE
    state.evals_since_improvement += 1
    if state.evals_since_improvement < cfg.patience:
        return CONTINUE
    if state.drops_taken >= cfg.max_drops:
        return STOP
    state.drops_taken += 1
    # recompute from the initial rate so lr == lr0 / factor**drops exactly
    state.current_lr = cfg.learning_rate / cfg.lr_drop_factor ** state.drops_taken
    state.evals_since_improvement = 0
    return DROPPED_LR
