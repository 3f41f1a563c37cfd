"""Trainable parameters, the Adam update, and gradient clipping.

One logical writer owns a Parameter during a training step; forward-only
evaluation may read parameters concurrently. Optimizer state (two moment
buffers plus a step counter) lives on the parameter itself.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor with Adam moment buffers."""

    __slots__ = ("m", "v", "step_count")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step_count = 0


def xavier_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Uniform init in +-sqrt(6/(fan_in+fan_out)); biases should use zeros."""
    fan_in = shape[-1] if len(shape) > 1 else shape[0]
    fan_out = shape[0]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def zero_gradients(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def global_gradient_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def clip_global_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``."""
    params = list(params)
    norm = global_gradient_norm(params)
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update; clears gradients afterwards."""
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.step_count += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step_count)
        v_hat = p.v / (1.0 - beta2 ** p.step_count)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None
