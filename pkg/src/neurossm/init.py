"""Deterministic, name-keyed parameter initialization.

Every parameter draws from its own sub-stream keyed by its full dotted name,
so two configs that share a parameter name start from identical values.
"""
from __future__ import annotations

import math

import numpy as np

from .seeding import stream
from .tensor import Tensor


class Initializer:
    def __init__(self, seed: int, prefix: str = ""):
        self.seed = int(seed)
        self.prefix = prefix

    def child(self, name: str) -> Initializer:
        return Initializer(self.seed, f"{self.prefix}{name}.")

    def rng(self, name: str) -> np.random.Generator:
        return stream(self.seed, "init/" + self.prefix + name)

    def fan_in(self, name: str, shape: tuple[int, ...], fan: int | None = None) -> Tensor:
        bound = 1.0 / math.sqrt(fan if fan is not None else shape[0])
        return Tensor(self.rng(name).uniform(-bound, bound, size=shape), requires_grad=True)

    def const(self, shape: tuple[int, ...], value: float) -> Tensor:
        return Tensor(np.full(shape, float(value)), requires_grad=True)
