"""Information-emitter attention and the frozen transformer stack.

Token layout per sample is ``[source_1..source_d, diag_1..diag_m]``. The
emitter mask blocks every key after position d, so source tokens only see
source tokens and each diagnosis token only reads from the sources; nothing
flows from a diagnosis token to any other token through attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import init
from .adapters import AdapterParams, adapter_forward
from .numeric import (NEG_INF, DimensionError, Param, Tensor, activation, add,
                      block_diagonal_mask, concat_cols, layer_norm, masked_row_softmax,
                      matmul, scale, segmented_attention, transpose)

SCALE_MODES = ("head_dim", "token_count")


@dataclass
class StackConfig:
    layers: int = 4
    heads: int = 4
    width: int = 64
    adapter_dim: int = 8
    scale_mode: str = "head_dim"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.width < 1 or self.adapter_dim < 1:
            raise ValueError(f"stack sizes must be positive: {self}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


@dataclass
class EmitterMask:
    d: int
    m: int
    mask: np.ndarray

    @property
    def tokens(self) -> int:
        return self.d + self.m


def build_mask(d: int, m: int, emitter: bool = True) -> EmitterMask:
    """``mask[i, j] = -inf`` for every key j past the source tokens, else 0.

    ``emitter=False`` gives plain (unmasked) self-attention over all d+m
    tokens, used by the ablation variants.
    """
    if d < 1:
        raise ValueError("d must be >= 1: there are no source tokens to attend to")
    if m < 0:
        raise ValueError(f"m must be >= 0, got {m}")
    mask = np.zeros((d + m, d + m))
    if emitter:
        mask[:, d:] = NEG_INF
    return EmitterMask(d, m, mask)


def batch_mask(mask: EmitterMask, batch: int) -> np.ndarray:
    return block_diagonal_mask([mask.mask] * batch)


@dataclass
class BlockWeights:
    wq: list[Param]
    wk: list[Param]
    wv: list[Param]
    wo: Param
    ff1: Param
    ff2: Param
    ln1_g: Param
    ln1_b: Param
    ln2_g: Param
    ln2_b: Param

    @classmethod
    def create(cls, width: int, heads: int, rng: np.random.Generator,
               prefix: str = "block") -> BlockWeights:
        hd = width // heads

        def frozen(shape, fan_in, name):
            return init.uniform(rng, shape, fan_in, f"{prefix}.{name}", trainable=False)

        wq, wk, wv = [], [], []
        for h in range(heads):
            wq.append(frozen((width, hd), width, f"wq{h}"))
            wk.append(frozen((width, hd), width, f"wk{h}"))
            wv.append(frozen((width, hd), width, f"wv{h}"))
        return cls(wq=wq, wk=wk, wv=wv,
                   wo=frozen((width, width), width, "wo"),
                   ff1=frozen((width, 4 * width), width, "ff1"),
                   ff2=frozen((4 * width, width), 4 * width, "ff2"),
                   ln1_g=init.ones((1, width), f"{prefix}.ln1_g", trainable=False),
                   ln1_b=init.zeros((1, width), f"{prefix}.ln1_b", trainable=False),
                   ln2_g=init.ones((1, width), f"{prefix}.ln2_g", trainable=False),
                   ln2_b=init.zeros((1, width), f"{prefix}.ln2_b", trainable=False))

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def width(self) -> int:
        return self.wo.rows

    def params(self) -> list[Param]:
        out: list[Param] = []
        for q, k, v in zip(self.wq, self.wk, self.wv):
            out += [q, k, v]
        return out + [self.wo, self.ff1, self.ff2,
                      self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b]


def attention_scale(w: BlockWeights, mode: str = "head_dim", tokens: int | None = None) -> float:
    if mode == "head_dim":
        return math.sqrt(w.width // w.heads)
    if mode == "token_count":
        if not tokens:
            raise ValueError("token_count scaling needs the per-sample token count")
        return math.sqrt(tokens)
    raise ValueError(f"unknown scale mode {mode!r}")


def _mask_array(mask, rows: int) -> tuple[np.ndarray, int]:
    """Per-sample mask and the number of stacked samples in ``rows``."""
    arr = mask.mask if isinstance(mask, EmitterMask) else np.asarray(mask, dtype=np.float64)
    t = arr.shape[0]
    if arr.ndim != 2 or arr.shape != (t, t) or t == 0 or rows % t:
        raise DimensionError(f"mask {arr.shape} does not tile {rows} tokens")
    return arr, rows // t


def masked_mha(y: Tensor, w: BlockWeights, mask, scale_by: float | None = None,
               project: bool = True, attn_out: list | None = None) -> Tensor:
    """Multi-head attention ``softmax(Q K^T / scale + mask) V`` per head.

    ``mask`` is an :class:`EmitterMask` or a raw ``t x t`` matrix. When ``y``
    stacks several samples of ``t`` tokens each, every sample attends only
    within itself. Heads are concatenated and, if ``project``, multiplied by
    ``wo``. Post-softmax weights (one ``(samples, t, t)`` array per head) are
    appended to ``attn_out``.
    """
    if y.cols != w.width:
        raise DimensionError(f"block width {w.width} but tokens have {y.cols} columns")
    m, samples = _mask_array(mask, y.rows)
    s = scale_by if scale_by is not None else attention_scale(w)
    heads = []
    for wq, wk, wv in zip(w.wq, w.wk, w.wv):
        q, k, v = matmul(y, wq), matmul(y, wk), matmul(y, wv)
        if samples == 1:
            weights = masked_row_softmax(scale(matmul(q, transpose(k)), 1.0 / s), m)
            if attn_out is not None:
                attn_out.append(weights.value[None])
            heads.append(matmul(weights, v))
        else:
            heads.append(segmented_attention(q, k, v, m, samples, s, attn_out))
    out = concat_cols(heads) if len(heads) > 1 else heads[0]
    return matmul(out, w.wo) if project else out


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def attn_decomposed(y: np.ndarray, w: BlockWeights, d: int,
                    scale_by: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Two-block form of emitter attention, without any mask.

    Source queries attend over source keys (``attn_s``, d rows); diagnosis
    queries attend over source keys too (``attn_c``, m rows). Heads are
    concatenated, before the output projection.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape[1] != w.width:
        raise DimensionError(f"block width {w.width} but tokens have {y.shape[1]} columns")
    if not 1 <= d <= y.shape[0]:
        raise DimensionError(f"d={d} outside 1..{y.shape[0]}")
    s = scale_by if scale_by is not None else attention_scale(w)
    ys, yc = y[:d], y[d:]
    src, diag = [], []
    for wq, wk, wv in zip(w.wq, w.wk, w.wv):
        ks, vs = ys @ wk.value, ys @ wv.value
        src.append(_softmax_rows((ys @ wq.value) @ ks.T / s) @ vs)
        diag.append(_softmax_rows((yc @ wq.value) @ ks.T / s) @ vs
                    if len(yc) else np.zeros((0, vs.shape[1])))
    return np.concatenate(src, axis=1), np.concatenate(diag, axis=1)


def block_forward(y: Tensor, w: BlockWeights, adapter: AdapterParams | None, mask,
                  scale_by: float | None = None, eps: float = 1e-5,
                  attn_out: list | None = None) -> Tensor:
    """Pre-norm residual block with the adapter on the attention input."""
    h = layer_norm(y, w.ln1_g, w.ln1_b, eps)
    if adapter is not None:
        h = adapter_forward(h, adapter)
    y = add(y, masked_mha(h, w, mask, scale_by, attn_out=attn_out))
    h = layer_norm(y, w.ln2_g, w.ln2_b, eps)
    return add(y, matmul(activation(matmul(h, w.ff1), "silu"), w.ff2))


@dataclass
class StackTrace:
    hidden: list[np.ndarray] = field(default_factory=list)
    attention: list[list[np.ndarray]] = field(default_factory=list)


def stack_forward(y: Tensor, stack: list[tuple[BlockWeights, AdapterParams | None]], mask,
                  scale_by: float | None = None, eps: float = 1e-5,
                  trace: StackTrace | None = None) -> Tensor:
    if not stack:
        raise ValueError("empty stack")
    widths = {w.width for w, _ in stack}
    if len(widths) != 1:
        raise DimensionError(f"blocks disagree on width: {sorted(widths)}")
    for w, adapter in stack:
        attn = [] if trace is not None else None
        y = block_forward(y, w, adapter, mask, scale_by, eps, attn_out=attn)
        if trace is not None:
            trace.hidden.append(y.value.copy())
            trace.attention.append(attn)
    return y
