"""Plain SGD and Adam over named parameters."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .nn import Module, Parameter


def _named(params) -> list[tuple[str, Parameter]]:
    if isinstance(params, Module):
        return list(params.named_parameters())
    out = []
    for i, item in enumerate(params):
        if isinstance(item, tuple):
            out.append(item)
        else:
            out.append((item.name or f"param{i}", item))
    return out


class Optimizer:
    def __init__(self, params: Module | Iterable, lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.params = _named(params)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def _grads(self):
        for name, p in self.params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter '{name}'")
            yield name, p, p.grad

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr: float, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for name, p, g in list(self._grads()):
            if self.momentum:
                v = self.momentum * self.velocity.get(name, 0.0) + g
                self.velocity[name] = v
                g = v
            p.data = p.data - self.lr * g


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        # validate everything first so a bad gradient leaves all parameters untouched
        grads = list(self._grads())
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p, g in grads:
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = b1 * self.m.get(name, 0.0) + (1.0 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype, copy=False)


def make_optimizer(name: str, params, lr: float) -> Optimizer:
    if name == "adam":
        return Adam(params, lr=lr)
    if name == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r} (expected 'adam' or 'sgd')")
