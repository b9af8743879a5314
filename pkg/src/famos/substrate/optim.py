"""Trainable parameters and the Adam update."""
from __future__ import annotations

import numpy as np

from .array import DiffArray, SubstrateError

__all__ = ["Parameter", "adam_step"]


class Parameter:
    """A leaf array plus its Adam moment slots.

    t counts completed optimizer steps for this parameter and drives
    the bias correction.
    """

    __slots__ = ("array", "name", "m", "v", "t")

    def __init__(self, values, name: str):
        self.array = DiffArray(np.asarray(values, dtype=np.float32), requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.array.values)
        self.v = np.zeros_like(self.array.values)
        self.t = 0

    @property
    def values(self) -> np.ndarray:
        return self.array.values

    @property
    def grad(self) -> np.ndarray:
        return self.array.grad

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.array.shape

    def zero_grad(self) -> None:
        self.array.zero_grad()

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape}, t={self.t})"


def adam_step(params: list[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place.

    All gradients are validated before anything is touched, so a
    rejected step leaves every parameter unchanged.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise SubstrateError(f"non-finite gradient in parameter '{p.name}'")
    for p in params:
        p.t += 1
        g = p.grad
        p.m *= np.float32(beta1)
        p.m += np.float32(1.0 - beta1) * g
        p.v *= np.float32(beta2)
        p.v += np.float32(1.0 - beta2) * (g * g)
        m_hat = p.m / np.float32(1.0 - beta1 ** p.t)
        v_hat = p.v / np.float32(1.0 - beta2 ** p.t)
        p.array.values -= (np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(eps)))
