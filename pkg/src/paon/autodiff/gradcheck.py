"""Central finite-difference checks evaluated in 64-bit shadow precision."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, shadow64


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int, h: float = 1e-6) -> np.ndarray:
    """d fn / d arrays[index] by central differences; ``fn`` must return a scalar."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    with shadow64():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*[Tensor(a) for a in base]).item()
            flat[i] = orig - h
            fm = fn(*[Tensor(a) for a in base]).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    with shadow64():
        ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        backward(fn(*ts))
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``||a - b|| / max(||a||, ||b||)``."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-6) -> list[float]:
    """Relative error between analytic and numeric gradient for every input of ``fn``."""
    analytic = analytic_grads(fn, arrays)
    return [rel_error(analytic[i], numeric_grad(fn, arrays, i, h)) for i in range(len(arrays))]
