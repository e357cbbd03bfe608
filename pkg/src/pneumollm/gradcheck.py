"""Finite-difference verification of the full model at toy size."""

from __future__ import annotations

import numpy as np

from .emitter import StackConfig
from .model import ModelConfig, PneumoModel
from .numeric import GradCheckReport, bce_with_logits, grad_check


def toy_config(**overrides) -> ModelConfig:
    """d=3, m=2, n=12, n'=16, L=2, H=2."""
    base = dict(feat_dim=8, patches=2, enc_layers=3, tap_every=1, token_width=12, m=2,
                head_init="uniform",
                stack=StackConfig(layers=2, heads=2, width=16, adapter_dim=4))
    base.update(overrides)
    return ModelConfig(**base)


def randomize_trainable(model: PneumoModel, seed: int = 0, scale: float = 0.3) -> None:
    """Move every trainable entry off its init so no gradient path is trivially zero."""
    rng = np.random.default_rng(seed)
    for p in model.trainable_params():
        p.value[...] = p.value + scale * rng.uniform(-1.0, 1.0, size=p.shape)


def full_model_check(cfg: ModelConfig | None = None, seed: int = 0, samples: int = 2,
                     h: float = 1e-5) -> GradCheckReport:
    cfg = cfg or toy_config()
    model = PneumoModel.create(cfg)
    randomize_trainable(model, seed)
    rng = np.random.default_rng(seed + 1)
    feats = rng.normal(size=(samples, cfg.feat_dim))
    labels = np.arange(samples) % 2
    x = model.encoder.encode_batch(feats)

    def loss():
        return bce_with_logits(model.forward_tokens(x), labels)

    return grad_check(loss, model.params(), h=h)
