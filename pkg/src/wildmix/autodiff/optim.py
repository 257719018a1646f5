"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState) -> None:
    """One in-place Adam update; increments ``t`` and clears every grad."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or p.shape} has no gradient")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for i, p in enumerate(params):
        g = p.grad.astype(p.data.dtype, copy=False)
        m = state.m.get(i)
        if m is None or m.shape != p.shape:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.lr:
            p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
        p.grad = None


class Adam:
    """Convenience wrapper binding a parameter list to an :class:`AdamState`."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr, betas[0], betas[1], eps)

    def step(self):
        adam_step(self.params, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
