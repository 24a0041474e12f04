"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, List, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

RELATIVE_FLOOR = 1e-6


def numerical_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                        eps: float = 1e-5) -> List[np.ndarray]:
    """d fn / d arrays[i] by central differences; ``fn`` maps Tensors to a scalar Tensor."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    with T.no_grad():
        for i, arr in enumerate(arrays):
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = fn(*[Tensor(a) for a in arrays]).item()
                flat[j] = orig - eps
                fm = fn(*[Tensor(a) for a in arrays]).item()
                flat[j] = orig
                gflat[j] = (fp - fm) / (2 * eps)
            grads.append(g)
    return grads


def analytic_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> List[np.ndarray]:
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    T.backward(out)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = RELATIVE_FLOOR) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / den)) if analytic.size else 0.0


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and finite-difference gradients."""
    a = analytic_gradients(fn, arrays)
    n = numerical_gradients(fn, arrays, eps)
    return max(relative_error(x, y) for x, y in zip(a, n))


def projected(fn: Callable[..., Tensor], shape, seed: int = 0) -> Callable[..., Tensor]:
    """Reduce a tensor-valued ``fn`` to a scalar via a fixed random projection."""
    weights = Tensor(np.random.default_rng(seed).normal(size=shape))

    def scalar(*args):
        return T.sum_(T.mul(fn(*args), weights))

    return scalar
