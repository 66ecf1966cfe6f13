"""Patch-wise training loop with periodic full-image validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, DatasetManifest, apply_channel_means, sample_patch
from .evaluate import aggregate_predictions, predict_probs
from .network import (
    ModelState,
    NetworkSpec,
    backward,
    forward,
    init_model,
    min_input_size,
)
from .optim import DROPPED_LR, STOP, OptimConfig, OptimState, plateau_update, sgd_step
from .ops import cross_entropy
from .util import split_rng


class TrainingDiverged(RuntimeError):
    """Training loss became NaN; carries the log collected so far."""

    def __init__(self, message: str, log: "TrainLog"):
        super().__init__(message)
        self.log = log


@dataclass
class TrainConfig:
    scale: int
    batch_size: int = 16
    steps_per_validation: int = 50
    max_steps: int = 1200
    seed: int = 0
    optim: OptimConfig = field(default_factory=OptimConfig)
    class_uniform: bool = True
    hflip: bool = False  # horizontal-flip augmentation, off by default

    def __post_init__(self):
        if self.batch_size < 1 or self.steps_per_validation < 1:
            raise ValueError("batch_size and steps_per_validation must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


@dataclass
class TrainLog:
    step_losses: list[tuple[int, float]] = field(default_factory=list)
    validations: list[tuple[int, float, float, float]] = field(default_factory=list)
    stop_reason: str = ""

    def to_csv(self, path) -> None:
        lines = ["event,step,train_loss,val_loss,val_mca,lr,note"]
        events = [("step", s, repr(l), "", "", "", "") for s, l in self.step_losses]
        events += [("validation", s, "", repr(vl), repr(m), repr(lr), "")
                   for s, vl, m, lr in self.validations]
        events.sort(key=lambda e: (e[1], e[0] != "step"))
        for ev in events:
            lines.append(",".join(str(v) for v in ev))
        last = self.step_losses[-1][0] if self.step_losses else 0
        lines.append(f"stop,{last},,,,,{self.stop_reason}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _check_sizes(manifest: DatasetManifest, spec: NetworkSpec, cfg: TrainConfig):
    """Fail before step 1 if any train image is under the crop or any
    validation image is under the network minimum."""
    crop = spec.train_crop
    m = min_input_size(spec)
    for rec in manifest.split_records("train"):
        h, w = manifest.load_pixels(rec, cfg.scale).shape[1:]
        if h < crop or w < crop:
            raise DataError(
                f"train record {rec.id} at scale {cfg.scale} is {h}x{w}, "
                f"smaller than the {crop}-pixel crop")
    for rec in manifest.split_records("validation"):
        h, w = manifest.load_pixels(rec, cfg.scale).shape[1:]
        if h < m or w < m:
            raise DataError(
                f"validation record {rec.id} at scale {cfg.scale} is {h}x{w}, "
                f"below the network minimum input size {m}")


def _sample_batch(manifest: DatasetManifest, cfg: TrainConfig, crop: int,
                  sampler_rng, flip_rng):
    patches = [
        sample_patch(manifest, "train", cfg.scale, crop, sampler_rng,
                     class_uniform=cfg.class_uniform)
        for _ in range(cfg.batch_size)
    ]
    x = np.stack([p.pixels for p in patches])
    labels = np.array([p.class_label for p in patches], dtype=np.int64)
    if cfg.hflip:
        flips = flip_rng.random(cfg.batch_size) < 0.5
        x[flips] = x[flips, :, :, ::-1]
    return apply_channel_means(x, manifest.channel_means), labels


def validate(model: ModelState, manifest: DatasetManifest, split: str,
             scale: int) -> tuple[float, float]:
    """Full-image eval-mode pass over a split: (mean loss, MCA)."""
    records = manifest.split_records(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    losses = []
    y_true = []
    y_pred = []
    for rec in records:
        probs = predict_probs(model, manifest.load_pixels(rec, scale),
                              manifest.channel_means)
        losses.append(cross_entropy(probs, np.array([rec.class_label])))
        y_true.append(rec.class_label)
        y_pred.append(int(np.argmax(probs[0])))
    _, mca, _ = aggregate_predictions(
        np.array(y_true), np.array(y_pred), manifest.num_classes)
    return float(np.mean(losses)), mca


def train(manifest: DatasetManifest, spec: NetworkSpec,
          cfg: TrainConfig) -> tuple[ModelState, TrainLog]:
    """Run the patch-sampling / SGD / plateau-schedule loop.

    Every steps_per_validation steps the validation split is scored with
    full-image inference; the model snapshot with the best validation loss
    is what gets returned (the final weights, if validation never ran).
    Deterministic for a fixed config: all randomness comes from named
    streams split off cfg.seed.
    """
    if cfg.scale not in manifest.scales:
        raise DataError(f"manifest has no scale {cfg.scale} (has {manifest.scales})")
    model = init_model(spec, cfg.seed)
    log = TrainLog()
    if cfg.max_steps == 0:
        log.stop_reason = "max_steps"
        return model, log
    _check_sizes(manifest, spec, cfg)

    sampler_rng = split_rng(cfg.seed, "sampler", cfg.scale)
    dropout_rng = split_rng(cfg.seed, "dropout", cfg.scale)
    flip_rng = split_rng(cfg.seed, "augment", cfg.scale)
    opt_state = OptimState.for_params(model.params, cfg.optim)
    best: tuple[float, dict] | None = None

    for step in range(1, cfg.max_steps + 1):
        x, labels = _sample_batch(manifest, cfg, spec.train_crop,
                                  sampler_rng, flip_rng)
        _, probs, cache = forward(model, x, mode="train", rng=dropout_rng)
        loss = cross_entropy(probs, labels)
        log.step_losses.append((step, loss))
        if math.isnan(loss):
            log.stop_reason = "diverged"
            raise TrainingDiverged(f"training loss is NaN at step {step}", log)
        grads = backward(model, cache, labels)
        sgd_step(model.params, grads, opt_state, cfg.optim)

        if step % cfg.steps_per_validation == 0:
            val_loss, val_mca = validate(model, manifest, "validation", cfg.scale)
            log.validations.append((step, val_loss, val_mca, opt_state.current_lr))
            if best is None or val_loss < best[0]:
                best = (val_loss, model.clone_params())
            action = plateau_update(opt_state, cfg.optim, val_loss)
            if action == STOP:
                log.stop_reason = "plateau"
                break
    if not log.stop_reason:
        log.stop_reason = "max_steps"
    if best is not None:
        model = ModelState(spec=model.spec, params=best[1], rng_seed=cfg.seed)
    return model, log
