"""Central finite-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad


def numeric_gradient(loss_fn: Callable[[], Tensor], param: Tensor, step: float = 1e-4) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().data)
            flat[i] = orig - step
            down = float(loss_fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-4,
    floor: float = 1e-6,
) -> dict[str, float]:
    """Max relative error between reverse-mode and central-difference gradients, per parameter.

    ``loss_fn`` must rebuild the graph from the current parameter values on every call.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    report = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(loss_fn, p, step)
        report[name] = float(relative_error(analytic, numeric, floor).max())
    return report
