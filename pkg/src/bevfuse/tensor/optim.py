"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .core import Tensor


@dataclass
class OptimizerState:
    lr: float = 2e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """One in-place AdamW update of ``params``.

    Moments are bias-corrected; decay is applied to the weights directly
    (``w -= lr * wd * w``), not folded into the gradient.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch in adamw_step: {p.shape}, {g.shape}, {m.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 2e-4, weight_decay: float = 1e-2,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, beta1=betas[0],
                                    beta2=betas[1], eps=eps)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step([p.data for p in self.params], grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_summary(self) -> Dict[str, float]:
        return {"step": self.state.step, "lr": self.state.lr}
