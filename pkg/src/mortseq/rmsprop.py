"""RMSProp with a per-parameter squared-gradient accumulator."""
from __future__ import annotations

import numpy as np


class RmsPropState:
    def __init__(self, rho: float = 0.9, eps: float = 1e-8):
        if not 0.0 <= rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if eps < 0:
            raise ValueError("eps must be non-negative")
        self.rho = rho
        self.eps = eps
        self.sq = {}
        self.steps = 0


def rmsprop_step(params: dict, grads: dict, state: RmsPropState, lr: float) -> dict:
    """In-place update ``theta -= lr * g / (sqrt(s) + eps)``; returns ``params``.

    ``s`` starts at zero and tracks ``rho * s + (1 - rho) * g**2``.
    """
    rho, eps = state.rho, state.eps
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        s = state.sq.get(name)
        if s is None:
            s = state.sq[name] = np.zeros_like(p)
        s *= rho
        s += (1.0 - rho) * g * g
        p -= lr * g / (np.sqrt(s) + eps)
    state.steps += 1
    return params
