"""AdamW with decoupled weight decay over named :class:`Tensor` parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Adam with weight decay applied directly to the weights (not the gradient).

    Parameters are keyed by name so error messages and state dumps can refer
    to them; only the tensors passed in are ever touched.
    """

    def __init__(self, params: Mapping[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
        for name, p in self.params.items():
            self.state.exp_avg[name] = np.zeros_like(p.data)
            self.state.exp_avg_sq[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
        st = self.state
        st.step += 1
        b1, b2 = st.betas
        bc1 = 1.0 - b1**st.step
        bc2 = 1.0 - b2**st.step
        for name, p in self.params.items():
            g = p.grad
            m, v = st.exp_avg[name], st.exp_avg_sq[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if st.weight_decay:
                p.data *= 1.0 - st.lr * st.weight_decay
            denom = np.sqrt(v / bc2) + st.eps
            p.data -= (st.lr / bc1) * m / denom


def adamw_step(params: Mapping[str, Tensor], opt: AdamW) -> None:
    """Apply one update to ``params`` (which must be the optimizer's own set)."""
    if set(params) != set(opt.params):
        raise ValueError("parameter set differs from the optimizer's")
    opt.step()
