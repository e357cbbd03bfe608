"""Dense 2-D float64 matrices with a minimal reverse-mode tape.

Every differentiable op returns a :class:`Tensor`. When a :class:`Tape` is
active (``with Tape() as tape:``) the op is recorded together with a closure
that pushes the output gradient back to its operands; ``tape.backward(loss)``
replays the records in reverse. Without an active tape the ops are plain
numpy computations, which is what inference and finite-difference checks use.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

NEG_INF = -np.inf


class DimensionError(ValueError):
    pass


class DegenerateRowError(ValueError):
    """A softmax row had every entry masked out."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"expected a 2-D matrix, got ndim={arr.ndim}")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # operator sugar, used sparingly in model code
    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)


class Param(Tensor):
    """A named matrix with a gradient accumulator and a trainable flag."""

    __slots__ = ("trainable",)

    def __init__(self, value, trainable: bool = True, name: str = ""):
        super().__init__(value, requires_grad=trainable, name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        flag = "trainable" if self.trainable else "frozen"
        return f"Param({self.name!r}, shape={self.shape}, {flag})"


def const(value) -> Tensor:
    return Tensor(value, requires_grad=False)


@dataclass
class _Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed differentiable ops.

    Tapes are single-owner; the active tape is tracked per thread so that
    independent folds can train concurrently.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def backward(self, loss: Tensor) -> None:
        if loss.shape != (1, 1):
            raise DimensionError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.out), None)
            if g_out is None:
                continue
            for parent, g in zip(rec.parents, rec.backward(g_out)):
                if g is None or not parent.requires_grad:
                    continue
                if isinstance(parent, Param):
                    parent.grad += g
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _record(value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.requires_grad = needs
    out.name = ""
    tapes = _stack()
    if needs and tapes:
        tapes[-1].records.append(_Record(out, parents, backward))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# linear algebra and structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _record(av @ bv, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1×cols row broadcast over ``a``'s rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record(a.value + b.value, (a, b), lambda g: (g, g))
    if b.rows == 1 and b.cols == a.cols:
        return _record(a.value + b.value, (a, b),
                       lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.value * c, (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    return _record(a.value.T.copy(), (a,), lambda g: (g.T,))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    widths = {p.cols for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows width mismatch: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.value for p in parts], axis=0), parts, backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    heights = {p.rows for p in parts}
    if len(heights) != 1:
        raise DimensionError(f"concat_cols height mismatch: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.value for p in parts], axis=1), parts, backward)


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows by integer index (repeats allowed)."""
    idx = np.asarray(index, dtype=np.intp)
    n = a.rows

    def backward(g):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.value[idx], (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _record(a.value[:, start:stop].copy(), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size
    shape = a.shape
    return _record(np.array([[a.value.sum() / n]]), (a,),
                   lambda g: (np.full(shape, g[0, 0] / n),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.array([[a.value.sum()]]), (a,),
                   lambda g: (np.full(shape, g[0, 0]),))


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def activation(x: Tensor, kind: str) -> Tensor:
    xv = x.value
    if kind == "relu":
        mask = xv > 0
        return _record(np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid(xv)
        return _record(s, (x,), lambda g: (g * s * (1.0 - s),))
    if kind == "silu":
        s = _sigmoid(xv)
        return _record(xv * s, (x,), lambda g: (g * (s + xv * s * (1.0 - s)),))
    raise ValueError(f"unknown activation {kind!r}")


def masked_row_softmax(logits: Tensor, mask) -> Tensor:
    """Row softmax of ``logits + mask`` where mask entries are 0 or -inf.

    Masked positions get exactly zero weight. A row with no unmasked entry is
    an error rather than a row of NaNs.
    """
    mv = mask.value if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    lv = logits.value
    if mv.shape != lv.shape:
        raise DimensionError(f"mask shape {mv.shape} != logits shape {lv.shape}")
    if not np.all((mv == 0.0) | np.isneginf(mv)):
        raise ValueError("mask entries must be 0 or -inf")
    z = lv + mv
    top = z.max(axis=1, keepdims=True)
    dead = np.isneginf(top[:, 0])
    if dead.any():
        raise DegenerateRowError(f"rows {np.flatnonzero(dead).tolist()} are fully masked")
    e = np.exp(z - top)  # exp(-inf) == 0 exactly
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(p, (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise DimensionError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} vs input width {x.cols}")
    xv = x.value
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value

    def backward(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return (dx,
                (g * xhat).sum(axis=0, keepdims=True),
                g.sum(axis=0, keepdims=True))

    return _record(xhat * gv + bias.value, (x, gain, bias), backward)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over a column of logits, in log-sum-exp form."""
    z = logits.value
    y = np.asarray(labels, dtype=np.float64).reshape(z.shape)
    # -[y log s(z) + (1-y) log(1-s(z))] = max(z,0) - z*y + log(1+exp(-|z|))
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    s = _sigmoid(z)
    return _record(np.array([[losses.sum() / n]]), (logits,),
                   lambda g: (g[0, 0] * (s - y) / n,))


# ---------------------------------------------------------------------------
# finite-difference verification


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple[int, int]
    checked: int
    frozen_grads_zero: bool
    entries: list[tuple[str, tuple[int, int], float, float, float]] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol and self.frozen_grads_zero


def rel_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(scalar_fn: Callable[[], Tensor], params: Sequence[Param],
               h: float = 1e-5, floor: float = 1e-8,
               keep_entries: bool = False) -> GradCheckReport:
    """Compare tape gradients to central differences for every trainable entry.

    ``scalar_fn`` must read the current parameter values and return a 1×1
    tensor. ``floor`` bounds the denominator of the relative error so entries
    whose true gradient is ~0 are judged on absolute error instead.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = scalar_fn()
        if not np.isfinite(loss.value).all():
            raise NonFiniteLossError(f"loss is {loss.value.ravel()[0]}; gradient check aborted")
        tape.backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}

    worst = (0.0, "", (0, 0))
    checked = 0
    entries = []
    frozen_zero = True
    for p in params:
        if not p.trainable:
            frozen_zero &= bool(np.all(analytic[id(p)] == 0.0))
            continue
        for idx in np.ndindex(*p.shape):
            orig = p.value[idx]
            p.value[idx] = orig + h
            fp = scalar_fn().item()
            p.value[idx] = orig - h
            fm = scalar_fn().item()
            p.value[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteLossError(f"non-finite loss perturbing {p.name}{idx}")
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[id(p)][idx])
            err = rel_error(ana, num, floor)
            checked += 1
            if keep_entries:
                entries.append((p.name, idx, ana, num, err))
            if err > worst[0]:
                worst = (err, p.name, tuple(int(i) for i in idx))
    return GradCheckReport(worst[0], worst[1], worst[2], checked, frozen_zero, entries)


def block_diagonal_mask(blocks: Sequence[np.ndarray]) -> np.ndarray:
    """Place per-sample masks on the diagonal; everything off-block is -inf."""
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.full((rows, cols), NEG_INF)
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def _check_mask(mv: np.ndarray) -> None:
    if not np.all((mv == 0.0) | np.isneginf(mv)):
        raise ValueError("mask entries must be 0 or -inf")
    dead = np.all(np.isneginf(mv), axis=1)
    if dead.any():
        raise DegenerateRowError(f"rows {np.flatnonzero(dead).tolist()} are fully masked")


def segmented_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, segments: int,
                        scale_by: float, weights_out: list | None = None) -> Tensor:
    """``softmax(q_s k_s^T / scale + mask) v_s`` independently for each row segment.

    The rows of ``q``, ``k``, ``v`` are ``segments`` consecutive blocks of
    ``t = mask.shape[0]`` tokens; no block attends to another. This is the
    batched equivalent of ``masked_row_softmax`` on a block-diagonal mask,
    without materialising the off-block entries.
    """
    mv = np.asarray(mask, dtype=np.float64)
    t = mv.shape[0]
    if mv.shape != (t, t) or q.rows != segments * t or k.shape != q.shape or v.rows != q.rows:
        raise DimensionError(f"segmented_attention: q{q.shape} k{k.shape} v{v.shape} "
                             f"mask{mv.shape} segments={segments}")
    _check_mask(mv)
    hq, hv = q.cols, v.cols
    qv = q.value.reshape(segments, t, hq)
    kv = k.value.reshape(segments, t, hq)
    vv = v.value.reshape(segments, t, hv)
    z = qv @ kv.transpose(0, 2, 1) * (1.0 / scale_by) + mv
    z -= z.max(axis=2, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=2, keepdims=True)
    if weights_out is not None:
        weights_out.append(p)

    def backward(g):
        gv = g.reshape(segments, t, hv)
        dp = gv @ vv.transpose(0, 2, 1)
        ds = p * (dp - (dp * p).sum(axis=2, keepdims=True)) * (1.0 / scale_by)
        dq = (ds @ kv).reshape(-1, hq)
        dk = (ds.transpose(0, 2, 1) @ qv).reshape(-1, hq)
        dv = (p.transpose(0, 2, 1) @ gv).reshape(-1, hv)
        return dq, dk, dv

    return _record((p @ vv).reshape(-1, hv), (q, k, v), backward)
