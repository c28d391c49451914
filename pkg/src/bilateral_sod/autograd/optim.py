"""Stochastic gradient descent with momentum and decoupled parameter groups."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .nn import Parameter


@dataclass
class ParamGroup:
    name: str
    params: list[tuple[str, Parameter]]
    lr: float


@dataclass
class SGD:
    """``v <- momentum*v + grad + wd*param``; ``param <- param - lr*v``.

    Parameters whose ``grad`` is ``None`` are skipped entirely (no momentum or
    weight-decay drift), so a parameter that took no part in the loss of a step
    keeps its exact value through that step.
    """

    groups: list[ParamGroup]
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for group in self.groups:
            if group.lr <= 0:
                raise ValueError(f"learning rate must be positive, got {group.lr} for group {group.name!r}")

    @classmethod
    def single(cls, params: Sequence[tuple[str, Parameter]], lr: float, momentum: float = 0.0,
               weight_decay: float = 0.0) -> "SGD":
        return cls([ParamGroup("all", list(params), lr)], momentum=momentum, weight_decay=weight_decay)

    def named_parameters(self):
        for group in self.groups:
            yield from group.params

    def step(self, lrs: Optional[dict[str, float]] = None) -> None:
        """Apply one update, optionally overriding group learning rates, then clear grads.

        A scheduled rate of exactly 0 (the first warmup step) is accepted: the
        velocity still integrates the gradient but parameters stay put.
        """
        for group in self.groups:
            lr = group.lr if lrs is None else lrs[group.name]
            if lr < 0:
                raise ValueError(f"learning rate must be non-negative, got {lr}")
            for name, p in group.params:
                if p.grad is None:
                    continue
                d = p.grad
                if self.weight_decay:
                    d = d + self.weight_decay * p.data
                if self.momentum:
                    v = self.velocity.get(name)
                    v = d.copy() if v is None else self.momentum * v + d
                    self.velocity[name] = v
                    d = v
                p.data = (p.data - lr * d).astype(p.dtype, copy=False)
        self.zero_grad()

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None
