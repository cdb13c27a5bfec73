"""AdamW with bias correction over lists of numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])

    def to_dict(self) -> dict:
        return {"step": self.step, "m": [a.tolist() for a in self.m],
                "v": [a.tolist() for a in self.v]}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(int(d["step"]), [np.asarray(a, dtype=np.float64) for a in d["m"]],
                   [np.asarray(a, dtype=np.float64) for a in d["v"]])


def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999),
              eps_hat: float = 1e-8, weight_decay: float = 0.0) -> AdamState:
    """Update ``params`` in place and return the advanced state.

    Weight decay is decoupled: ``p -= lr * weight_decay * p`` before the
    adaptive step.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state = AdamState.zeros_like(params)
    b1, b2 = betas
    step = state.step + 1
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_m, new_v = [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps_hat)
        new_m.append(m)
        new_v.append(v)
    return AdamState(step, new_m, new_v)
