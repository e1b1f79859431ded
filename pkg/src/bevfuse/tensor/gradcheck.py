"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor

# elements with |grad| below this are compared absolutely
REL_FLOOR = 1e-2


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3,
                    seed: int = 0) -> float:
    """Max relative error between autodiff and finite differences.

    ``fn`` maps tensors to a tensor of any shape; it is reduced to a scalar
    by a fixed random projection so every output element is exercised.
    Inputs should be float64.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape)

    loss = (out * Tensor(proj)).sum()
    loss.backward()

    def scalar():
        return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    worst = 0.0
    for a, t in zip(arrays, tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        numeric = numerical_grad(scalar, a, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
