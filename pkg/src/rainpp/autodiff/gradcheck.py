"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data.sum())
        flat[i] = orig - h
        fm = float(fn().data.sum())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` in the Euclidean norm.

    The floor keeps exactly-zero gradients from being scored on finite-difference
    rounding noise alone.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor],
                    h: float = 1e-5) -> list[float]:
    """Relative error between analytic and numerical gradients, one per input.

    ``fn`` must rebuild the graph on every call and return a tensor whose sum
    is the checked scalar.
    """
    out = fn()
    root = out if out.size == 1 else out.sum()
    analytic = grad(root, inputs)
    return [relative_error(a, numerical_grad(fn, x, h)) for a, x in zip(analytic, inputs)]
