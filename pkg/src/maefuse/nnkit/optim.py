"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, NonFiniteError
from .tensor import Parameter


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: list[Parameter], state: AdamWState) -> None:
    """Apply one AdamW update in place to every non-frozen parameter.

    Gradients are read from ``p.grad``. All gradients are validated before
    anything is written, so a NaN aborts the step with no partial update.
    """
    live = [p for p in params if not p.frozen]
    for p in live:
        if p.grad is None:
            raise ContractError(f"no gradient for trainable parameter {p.name or '<unnamed>'}")
        if p.grad.shape != p.shape:
            raise ContractError(f"gradient shape {p.grad.shape} != parameter shape {p.shape} for {p.name}")
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name or '<unnamed>'}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p in live:
        key = p.name or str(id(p))
        g = p.grad
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class AdamW:
    """Optimizer bound to a fixed list of parameters."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        names = [p.name for p in self.params]
        if any(not n for n in names) or len(set(names)) != len(names):
            raise ContractError("AdamW needs uniquely named parameters")
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamw_step(self.params, self.state)
