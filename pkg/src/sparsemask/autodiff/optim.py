"""SGD with momentum, L2 weight decay and a "poly" learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import GradientError
from .tensor import Tensor


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    """``base_lr * (1 - step/total_steps) ** power``, clipped at zero past the horizon."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


@dataclass
class ParamGroup:
    params: list[Tensor]
    base_lr: float
    weight_decay: float = 4e-5
    name: str = ""


@dataclass
class OptimizerState:
    momentum: float = 0.9
    poly_power: float = 0.9
    step: int = 0
    total_steps: int = 1
    velocity: dict[int, np.ndarray] = field(default_factory=dict)


class SGD:
    """Momentum SGD over named parameter groups.

    Update per parameter: ``v <- momentum * v + (grad + wd * param)`` then
    ``param <- param - lr(step) * v``.
    """

    def __init__(self, groups: list[ParamGroup], total_steps: int, momentum: float = 0.9,
                 poly_power: float = 0.9):
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if total_steps < 1:
            raise ValueError("total_steps must be positive")
        for g in groups:
            if g.base_lr <= 0 or g.weight_decay < 0:
                raise ValueError(f"invalid hyper-parameters for group {g.name!r}")
        self.groups = groups
        self.state = OptimizerState(momentum=momentum, poly_power=poly_power, total_steps=total_steps)

    def lr(self, group: ParamGroup, step: int | None = None) -> float:
        step = self.state.step if step is None else step
        return poly_lr(group.base_lr, step, self.state.total_steps, self.state.poly_power)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params:
                p.grad = None

    def step(self) -> None:
        st = self.state
        if st.step >= st.total_steps:
            raise RuntimeError(f"optimizer already ran its {st.total_steps} scheduled steps")
        for group in self.groups:
            lr = self.lr(group)
            for idx, p in enumerate(group.params):
                if p.grad is None:
                    continue
                if not np.all(np.isfinite(p.grad)):
                    label = p.name or f"{group.name}[{idx}]"
                    raise GradientError(f"non-finite gradient for parameter {label}")
                key = id(p)
                d = p.grad + group.weight_decay * p.data if group.weight_decay else p.grad
                v = st.velocity.get(key)
                v = d.copy() if v is None else st.momentum * v + d
                st.velocity[key] = v
                p.data -= (lr * v).astype(p.dtype)
        st.step += 1

    # velocity keyed by parameter order for checkpointing
    def velocity_list(self) -> list[np.ndarray | None]:
        return [self.state.velocity.get(id(p)) for g in self.groups for p in g.params]

    def load_velocity(self, buffers: list[np.ndarray | None]) -> None:
        params = [p for g in self.groups for p in g.params]
        if len(buffers) != len(params):
            raise ValueError("velocity buffer count does not match parameters")
        self.state.velocity = {id(p): b.copy() for p, b in zip(params, buffers) if b is not None}
