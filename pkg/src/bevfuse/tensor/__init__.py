"""Minimal dense-tensor engine with reverse-mode autodiff."""

from .core import NonFiniteError, Tensor, as_tensor, is_grad_enabled, no_grad
from .optim import AdamW, OptimizerState, adamw_step
from . import ops, nn

__all__ = [
    "AdamW",
    "NonFiniteError",
    "OptimizerState",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "is_grad_enabled",
    "nn",
    "no_grad",
    "ops",
]
