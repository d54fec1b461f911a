"""
Adam optimizer over tape tensors
"""

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tape import Tensor


@dataclass
class AdamState:
    """Moment accumulators keyed by parameter position"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lrs: Sequence[float] | None = None,
) -> Sequence[Tensor]:
    """One bias-corrected Adam update, in place

    Args:
        params: Parameters to update
        grads: Gradients matching params
        state: Moments and step counter (advanced by one)
        lrs: Optional per-parameter learning rates (default state.lr)
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step

    for k, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"gradient {g.shape} for parameter {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        lr = state.lr if lrs is None else lrs[k]
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params


class Adam:
    """
    Adam with parameter groups

    Each group is a list of tensors with its own base learning rate; `scale`
    multiplies every group's rate (used for step schedules).
    """

    def __init__(self, groups: dict[str, tuple[list[Tensor], float]], **hyper):
        self.names = list(groups)
        self.params: list[Tensor] = []
        self.base_lrs: list[float] = []
        self.group_of: list[str] = []
        for name, (tensors, lr) in groups.items():
            for t in tensors:
                self.params.append(t)
                self.base_lrs.append(lr)
                self.group_of.append(name)
        self.state = AdamState(**hyper)
        self.scale = 1.0

    def lr(self, group: str) -> float:
        for name, base in zip(self.group_of, self.base_lrs):
            if name == group:
                return base * self.scale
        raise KeyError(group)

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        lrs = [base * self.scale for base in self.base_lrs]
        adam_step(self.params, grads, self.state, lrs)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
