"""Contextual multi-token engine and the two prompt baselines used in ablations.

The engine maps the d source tokens of a sample to m diagnosis tokens:
``logits = relu(X W1 + b1) W2 + b2`` (d x m), ``M_c = softmax(logits)`` and
``X_hat = M_c^T X``. All functions here work on a mini-batch whose source
tokens are stacked sample by sample into one ``(B*d) x n`` matrix; a single
sample is the ``B = 1`` case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import init
from .numeric import (DimensionError, Param, Tensor, activation, add, const,
                      block_diagonal_mask, masked_row_softmax, matmul, mul,
                      take_rows, transpose)

SOFTMAX_AXES = ("column", "row")


def engine_hidden_width(n: int) -> int:
    return max(1, n // 12)


@dataclass
class EngineParams:
    w1: Param  # n x h_e
    b1: Param
    w2: Param  # h_e x m
    b2: Param

    @classmethod
    def create(cls, n: int, m: int, rng: np.random.Generator) -> EngineParams:
        if n < 1 or m < 1:
            raise DimensionError(f"engine needs n >= 1 and m >= 1 (got n={n}, m={m})")
        h = engine_hidden_width(n)
        return cls(w1=init.uniform(rng, (n, h), n, "engine.w1"),
                   b1=init.zeros((1, h), "engine.b1"),
                   w2=init.uniform(rng, (h, m), h, "engine.w2"),
                   b2=init.zeros((1, m), "engine.b2"))

    @property
    def m(self) -> int:
        return self.w2.cols

    def params(self) -> list[Param]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class FixedPromptParams:
    """Learnable tokens shared by every sample (CoOp-style)."""

    tokens: Param  # m x n

    @classmethod
    def create(cls, n: int, m: int, rng: np.random.Generator) -> FixedPromptParams:
        return cls(tokens=init.uniform(rng, (m, n), n, "prompt.tokens"))

    @property
    def m(self) -> int:
        return self.tokens.rows

    def params(self) -> list[Param]:
        return [self.tokens]


@dataclass
class CocoopStyleParams:
    """Learnable tokens plus an input-conditioned offset (CoCoOp-style)."""

    tokens: Param  # m x n
    offset: Param  # n x n, applied to the mean source token

    @classmethod
    def create(cls, n: int, m: int, rng: np.random.Generator) -> CocoopStyleParams:
        return cls(tokens=init.uniform(rng, (m, n), n, "prompt.tokens"),
                   offset=init.uniform(rng, (n, n), n, "prompt.offset"))

    @property
    def m(self) -> int:
        return self.tokens.rows

    def params(self) -> list[Param]:
        return [self.tokens, self.offset]


def _check_batch(x: Tensor, batch: int) -> int:
    if x.cols == 0:
        raise DimensionError("source tokens have zero width (n = 0)")
    if batch < 1 or x.rows % batch or x.rows == 0:
        raise DimensionError(f"{x.rows} source rows do not split into {batch} samples")
    return x.rows // batch


def engine_logits(x: Tensor, p: EngineParams) -> Tensor:
    if x.cols != p.w1.rows:
        raise DimensionError(f"engine expects token width {p.w1.rows}, got {x.cols}")
    hidden = activation(add(matmul(x, p.w1), p.b1), "relu")
    return add(matmul(hidden, p.w2), p.b2)


def engine_forward_batch(x: Tensor, p: EngineParams, batch: int = 1,
                         axis: str = "column") -> tuple[Tensor, Tensor]:
    """Diagnosis tokens for a stacked batch.

    Returns ``(mix, x_hat)`` where ``mix`` is the ``(B*m) x (B*d)`` block-diagonal
    matrix whose b-th diagonal block is ``M_c(b)^T`` and ``x_hat = mix @ x``.
    """
    if axis not in SOFTMAX_AXES:
        raise ValueError(f"softmax axis must be one of {SOFTMAX_AXES}, got {axis!r}")
    d = _check_batch(x, batch)
    m = p.m
    logits = engine_logits(x, p)  # (B*d) x m
    tile = np.tile(np.arange(m), batch)
    if axis == "column":
        # each diagnosis token normalises over its own sample's d source tokens
        stacked = take_rows(transpose(logits), tile)  # (B*m) x (B*d)
        mask = block_diagonal_mask([np.zeros((m, d))] * batch)
        mix = masked_row_softmax(stacked, mask)
    else:
        weights = masked_row_softmax(logits, np.zeros(logits.shape))  # rows over m
        keep = np.isfinite(block_diagonal_mask([np.zeros((m, d))] * batch)).astype(float)
        mix = mul(take_rows(transpose(weights), tile), const(keep))
    return mix, matmul(mix, x)


def context_maps(mix: Tensor, batch: int, m: int) -> list[np.ndarray]:
    """Per-sample ``M_c`` (d x m) blocks out of the batched mixing matrix."""
    d = mix.cols // batch
    return [mix.value[b * m:(b + 1) * m, b * d:(b + 1) * d].T.copy() for b in range(batch)]


def engine_forward(x: Tensor, p: EngineParams, axis: str = "column") -> tuple[Tensor, Tensor]:
    """Single sample: returns ``(M_c, X_hat)`` with shapes d x m and m x n."""
    mix, x_hat = engine_forward_batch(x, p, 1, axis)
    return transpose(mix), x_hat


def fixed_prompt_forward(p: FixedPromptParams, batch: int = 1) -> Tensor:
    if batch == 1:
        return take_rows(p.tokens, np.arange(p.m))
    return take_rows(p.tokens, np.tile(np.arange(p.m), batch))


def conditional_prompt_forward(x: Tensor, p: CocoopStyleParams, batch: int = 1) -> Tensor:
    d = _check_batch(x, batch)
    if x.cols != p.tokens.cols:
        raise DimensionError(f"prompt width {p.tokens.cols} vs token width {x.cols}")
    pool = np.zeros((batch, batch * d))
    for b in range(batch):
        pool[b, b * d:(b + 1) * d] = 1.0 / d
    shift = matmul(matmul(const(pool), x), p.offset)  # B x n
    m = p.m
    return add(take_rows(p.tokens, np.tile(np.arange(m), batch)),
               take_rows(shift, np.repeat(np.arange(batch), m)))
