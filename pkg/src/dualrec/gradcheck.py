"""Finite-difference verification of analytic gradients.

The contract for every differentiable operation in this package is that
its backward pass matches central finite differences of the forward pass
to a relative error of 1e-4 in float64. This module is the independent
side of that check: it only ever calls the forward function.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .optim import Parameter, zero_gradients
from .tensor import Tensor, backward

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
# entries below this magnitude are compared on an absolute scale; central
# differences bottom out around 1e-10 regardless of the true gradient size
_REL_FLOOR = 1e-5


def finite_difference_gradient(
    forward: Callable[[], Tensor],
    param: Parameter,
    step: float = DEFAULT_STEP,
) -> np.ndarray:
    """Central differences of ``forward()`` w.r.t. every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        plus = forward().item()
        flat[i] = saved - step
        minus = forward().item()
        flat[i] = saved
        out[i] = (plus - minus) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def check_gradients(
    forward: Callable[[], Tensor],
    params: Mapping[str, Parameter],
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> dict[str, float]:
    """Compare analytic and numeric gradients for every named parameter.

    ``forward`` must rebuild the loss from scratch on each call (it is
    re-evaluated many times with perturbed parameter values). Returns the
    per-parameter worst relative error and raises ``AssertionError`` on
    the first parameter exceeding ``tolerance``.
    """
    zero_gradients(params.values())
    loss = forward()
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    zero_gradients(params.values())

    errors: dict[str, float] = {}
    for name, p in params.items():
        numeric = finite_difference_gradient(forward, p, step=step)
        err = max_relative_error(analytic[name], numeric)
        errors[name] = err
        if err > tolerance:
            raise AssertionError(
                f"gradient mismatch for '{name}': relative error {err:.3e} > {tolerance:.1e}"
            )
    return errors
