"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .tensor import Tensor


@dataclass
class AdamWState:
    """First/second moment buffers and the step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamWState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> tuple[list[np.ndarray], AdamWState]:
    """Return updated parameters and moments; inputs are not modified.

    The decay term ``lr * weight_decay * p`` is applied to the parameter
    directly, not folded into the gradient.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("params, grads and state must have the same length")
    t = state.step + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape or p.shape != v.shape:
            raise DimensionError(f"shape mismatch in AdamW: param {p.shape}, grad {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        p = p * (1.0 - lr * weight_decay)
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamWState(new_m, new_v, t)


@dataclass
class AdamW:
    """Stateful wrapper that updates ``Tensor`` parameters in place from their ``.grad``."""

    params: list[Tensor]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    state: AdamWState = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.state = AdamWState.zeros_like([p.data for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adamw_step(
            [p.data for p in self.params], grads, self.state,
            self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
        )
        for p, d in zip(self.params, new):
            p.data = d
