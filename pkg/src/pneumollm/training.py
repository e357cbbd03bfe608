"""BCE training with AdamW and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import PneumoModel
from .numeric import Param, Tape, bce_with_logits

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    base_lr: float = 3e-4
    warmup_epochs: int = 2
    weight_decay: float = 0.02
    epochs: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    schedule: str = "epoch"  # "epoch" or "step"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 1 or self.base_lr <= 0 or self.eps <= 0:
            raise ValueError(f"batch_size, base_lr and eps must be positive: {self}")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.weight_decay < 0:
            raise ValueError(f"epochs, warmup_epochs, weight_decay must be >= 0: {self}")
        if self.epochs and self.warmup_epochs >= self.epochs:
            raise ValueError(f"warmup_epochs={self.warmup_epochs} must be < epochs={self.epochs}")
        if self.schedule not in ("epoch", "step"):
            raise ValueError(f"schedule must be 'epoch' or 'step', got {self.schedule!r}")


class NonFiniteError(RuntimeError):
    pass


def bce_loss(logit: float, label: int) -> float:
    """Binary cross-entropy of a single logit, stable for any finite input."""
    z = float(logit)
    return max(z, 0.0) - z * label + math.log1p(math.exp(-abs(z)))


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at ``cfg.epochs``."""
    w, total = cfg.warmup_epochs, cfg.epochs
    if epoch < w:
        return cfg.base_lr * epoch / w
    progress = (epoch - w) / (total - w)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: list[Param], grads: list[np.ndarray], state: AdamState,
               lr: float, cfg: TrainConfig) -> AdamState:
    """One AdamW update in place; frozen params are skipped.

    Weight decay is decoupled: ``theta -= lr * wd * theta`` before the
    bias-corrected moment step.
    """
    for p, g in zip(params, grads):
        if p.trainable and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {p.name}; step aborted")
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for p, g in zip(params, grads):
        if not p.trainable:
            continue
        key = p.name or id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.value)
            state.v[key] = np.zeros_like(p.value)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p.value -= lr * cfg.weight_decay * p.value
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state


def train(model: PneumoModel, features: np.ndarray, labels: np.ndarray,
          cfg: TrainConfig) -> tuple[PneumoModel, list[float]]:
    """Mini-batch training in place; returns the model and mean loss per epoch."""
    labels = np.asarray(labels, dtype=np.float64)
    if len(labels) == 0:
        raise ValueError("empty training set")
    x_all = model.encoder.encode_batch(features)  # encoder is frozen: encode once
    params = model.trainable_params()
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    n = len(labels)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for k in range(steps_per_epoch):
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            model.zero_grad()
            with Tape() as tape:
                loss = bce_with_logits(model.forward_tokens(x_all[idx]), labels[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError(f"loss is {value} at epoch {epoch}, batch {k}")
                tape.backward(loss)
            at = epoch + k / steps_per_epoch if cfg.schedule == "step" else epoch
            adamw_step(params, [p.grad for p in params], state, lr_at(at, cfg), cfg)
            total += value * len(idx)
        trace.append(total / n)
        log.debug("epoch %d loss %.6f", epoch, trace[-1])
    return model, trace
