"""Small module system on top of the tape: parameters, layers, traversal."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype if dtype is not None else np.float64, name=name)


class Module:
    """Base class: attributes that are Parameters, Modules or lists of Modules are discovered."""

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(prefix=name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch; missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(_uniform(rng, bound, (n_out, n_in)))
        self.bias = Parameter(_uniform(rng, bound, (n_out,))) if bias else None

    def forward(self, x):
        return ops.dense(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1, bias: bool = True):
        if c_in % groups or c_out % groups:
            raise ValueError(f"Conv1d: channels {c_in}->{c_out} not divisible by groups={groups}")
        fan_in = (c_in // groups) * kernel_size
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Parameter(_uniform(rng, bound, (c_out, c_in // groups, kernel_size)))
        self.bias = Parameter(_uniform(rng, bound, (c_out,))) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x):
        return ops.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups)


class GroupNorm(Module):
    """Group normalisation with a per-channel affine."""

    def __init__(self, groups: int, channels: int, eps: float = 1e-5, affine: bool = True):
        if channels % groups:
            raise ValueError(f"GroupNorm: {channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.eps = eps
        self.weight = Parameter(np.ones(channels)) if affine else None
        self.bias = Parameter(np.zeros(channels)) if affine else None

    def forward(self, h):
        out = ops.group_norm(h, self.groups, self.eps)
        if self.weight is None:
            return out
        return out * ops.reshape(self.weight, (-1, 1)) + ops.reshape(self.bias, (-1, 1))


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng

    def forward(self, x):
        return ops.dropout(x, self.rate, self.rng, training=self.training)


def count_parameters(model: Module | None) -> int:
    """Exact number of trainable scalars."""
    if model is None:
        return 0
    return int(sum(p.size for p in model.parameters()))
