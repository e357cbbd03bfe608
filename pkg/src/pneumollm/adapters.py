"""Bottleneck adapters and the visual neck projecting tokens into the stack width."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import init
from .numeric import DimensionError, Param, Tensor, activation, add, matmul


@dataclass
class AdapterParams:
    down: Param  # width x r
    up: Param  # r x width, zero at init so the adapter starts as identity

    @classmethod
    def create(cls, width: int, r: int, rng: np.random.Generator,
               prefix: str = "adapter") -> AdapterParams:
        if r < 1:
            raise ValueError(f"adapter dim must be >= 1, got {r}")
        return cls(down=init.uniform(rng, (width, r), width, f"{prefix}.down"),
                   up=init.zeros((r, width), f"{prefix}.up"))

    @property
    def width(self) -> int:
        return self.down.rows

    @property
    def r(self) -> int:
        return self.down.cols

    def params(self) -> list[Param]:
        return [self.down, self.up]


def adapter_forward(x: Tensor, p: AdapterParams) -> Tensor:
    """Residual bottleneck: ``x + silu(x @ down) @ up``."""
    if x.cols != p.width:
        raise DimensionError(f"adapter width {p.width} but input has {x.cols} columns")
    return add(x, matmul(activation(matmul(x, p.down), "silu"), p.up))


def neck_hidden_width(out_width: int, requested: int = 128) -> int:
    # never wider than 4x the stack width at toy sizes
    return min(requested, 4 * out_width)


@dataclass
class NeckParams:
    w1: Param
    b1: Param
    w2: Param
    b2: Param

    @classmethod
    def create(cls, in_width: int, out_width: int, hidden: int,
               rng: np.random.Generator) -> NeckParams:
        return cls(w1=init.uniform(rng, (in_width, hidden), in_width, "neck.w1"),
                   b1=init.zeros((1, hidden), "neck.b1"),
                   w2=init.uniform(rng, (hidden, out_width), hidden, "neck.w2"),
                   b2=init.zeros((1, out_width), "neck.b2"))

    def params(self) -> list[Param]:
        return [self.w1, self.b1, self.w2, self.b2]


def neck_forward(x_cat: Tensor, p: NeckParams) -> Tensor:
    """Per-token Linear-SiLU-Linear from encoder width to stack width."""
    if x_cat.cols != p.w1.rows:
        raise DimensionError(f"neck expects width {p.w1.rows}, got {x_cat.cols}")
    hidden = activation(add(matmul(x_cat, p.w1), p.b1), "silu")
    return add(matmul(hidden, p.w2), p.b2)
