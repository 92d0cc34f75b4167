"""Trainable parameters and the Adam update."""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that carries its own Adam moment estimates."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name=None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0


def kaiming_uniform(shape, fan_in, rng, dtype=np.float32):
    """He/Kaiming uniform init for ReLU nets: U(-b, b), b = sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def zero_grad(params):
    for p in params:
        p.zero_grad()


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam, applied in place to each parameter."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {p.name or '<unnamed>'} has no gradient")
    for p in params:
        dt = p.dtype.type
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m *= dt(beta1)
        p.adam_m += dt(1 - beta1) * g
        p.adam_v *= dt(beta2)
        p.adam_v += dt(1 - beta2) * (g * g)
        m_hat = p.adam_m / dt(1 - beta1 ** t)
        v_hat = p.adam_v / dt(1 - beta2 ** t)
        p.data -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
