"""Seeded parameter initialisers shared by every module."""

from __future__ import annotations

import numpy as np

from .numeric import Param


def uniform(rng: np.random.Generator, shape: tuple[int, int], fan_in: int,
            name: str, trainable: bool = True, gain: float = 1.0) -> Param:
    bound = gain / np.sqrt(max(fan_in, 1))
    return Param(rng.uniform(-bound, bound, size=shape), trainable=trainable, name=name)


def zeros(shape: tuple[int, int], name: str, trainable: bool = True) -> Param:
    return Param(np.zeros(shape), trainable=trainable, name=name)


def ones(shape: tuple[int, int], name: str, trainable: bool = True) -> Param:
    return Param(np.ones(shape), trainable=trainable, name=name)
