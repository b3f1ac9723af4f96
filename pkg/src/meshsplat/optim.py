"""Adam optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus a shared step count."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray]) -> None:
    """One Adam update, in place on ``params``.

    ``grads`` aligns with ``params``; shapes must agree with the parameters
    and with any accumulators from earlier steps.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g in zip(params, grads):
        if g is None:
            continue
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.data.shape}")
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
            state.m[key], state.v[key] = m, v
        else:
            v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Convenience wrapper binding an AdamState to a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grad_map: dict | None = None) -> None:
        if grad_map is not None:
            grads = [grad_map.get(p) for p in self.params]
        else:
            grads = [p.grad for p in self.params]
        adam_step(self.state, self.params, grads)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
