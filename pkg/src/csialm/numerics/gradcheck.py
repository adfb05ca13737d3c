"""Central finite-difference oracle for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(fn().data.sum())
        flat[i] = old - h
        down = float(fn().data.sum())
        flat[i] = old
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps exactly-zero gradients from amplifying FD noise."""
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(np.ravel(a)), np.linalg.norm(np.ravel(b)), floor)
    return float(num / den)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between analytic and numerical gradients of ``sum(fn())``.

    Inputs must be float64 tensors with ``requires_grad`` set.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        t.grad = None
    out = fn()
    (out.sum() if out.size != 1 else out).backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numerical_grad(fn, t, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
