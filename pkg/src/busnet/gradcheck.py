"""Central finite differences, used to validate the tape's adjoints."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numerical_grad(f: Callable[[], float], arrays: Sequence[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """d f / d array for each array, perturbing entries in place one at a time."""
    grads = []
    for arr in arrays:
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = f()
            flat[k] = orig - eps
            down = f()
            flat[k] = orig
            g.reshape(-1)[k] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grad(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    found = tape.backward(loss)
    return [found.get(p, np.zeros_like(p.data)) for p in params]


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """|analytic - numeric| / (|numeric| + floor), elementwise."""
    return np.abs(analytic - numeric) / (np.abs(numeric) + floor)


def compare(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5):
    """Return (analytic, numeric) gradient lists for ``params``."""
    analytic = analytic_grad(loss_fn, params)
    numeric = numerical_grad(lambda: float(loss_fn().item()), [p.data for p in params], eps)
    return analytic, numeric
