"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 2e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays and the updated state."""
    b1, b2 = betas
    t = state.step + 1
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} of shape {p.shape}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    state.step = t
    return out, state


class Adam:
    """Stateful wrapper that updates :class:`Tensor` parameters in place."""

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.state = AdamState()

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        if grads is None:
            grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        new, self.state = adam_step(
            {n: p.data for n, p in self.params.items()}, grads, self.state, self.lr, self.betas, self.eps
        )
        for n, p in self.params.items():
            p.data = new[n]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
