"""SGD with classical/Nesterov momentum, coupled weight decay, and
milestone learning-rate schedules."""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class SgdConfig:
    lr: float
    momentum: float = 0.0
    nesterov: bool = False
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def __post_init__(self):
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError(f"milestones must be sorted, got {self.milestones}")

    def at(self, epoch: int) -> float:
        """base_lr * gamma^(milestones passed); a milestone counts from its own epoch."""
        if epoch < 0:
            raise ValueError(f"epoch must be nonnegative, got {epoch}")
        return self.base_lr * self.gamma ** bisect_right(self.milestones, epoch)


class _Group:
    __slots__ = ("params", "cfg", "lr")

    def __init__(self, params: dict[str, Tensor], cfg: SgdConfig):
        self.params = params
        self.cfg = cfg
        self.lr = cfg.lr


class Sgd:
    """Plain/momentum/Nesterov SGD over named parameter groups.

    Update per parameter with a populated grad buffer:
        g <- grad + weight_decay * w
        v <- momentum * v + g
        w <- w - lr * (momentum * v + g)   if nesterov
        w <- w - lr * v                    otherwise
    Parameters whose grad buffer is absent are never touched. Velocity
    buffers start at zero and are created lazily.
    """

    def __init__(self, groups: list[tuple[dict[str, Tensor], SgdConfig]]):
        seen: set[str] = set()
        self.groups = []
        for params, cfg in groups:
            for name in params:
                if name in seen:
                    raise ValueError(f"parameter {name!r} appears in two groups")
                seen.add(name)
            self.groups.append(_Group(dict(params), cfg))
        self.velocity: dict[str, np.ndarray] = {}

    def set_lr(self, lr: float) -> None:
        for group in self.groups:
            group.lr = lr

    def step(self) -> None:
        for group in self.groups:
            cfg = group.cfg
            for name, p in group.params.items():
                if p.grad is None:
                    continue
                g = p.grad
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * p.data
                if cfg.momentum:
                    v = self.velocity.get(name)
                    if v is None:
                        v = np.zeros_like(p.data)
                    v = cfg.momentum * v + g
                    self.velocity[name] = v
                    delta = cfg.momentum * v + g if cfg.nesterov else v
                else:
                    delta = g
                p.data -= group.lr * delta

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params.values():
                p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return dict(self.velocity)

    def load_state(self, velocity: dict[str, np.ndarray]) -> None:
        self.velocity = {k: np.array(v) for k, v in velocity.items()}
