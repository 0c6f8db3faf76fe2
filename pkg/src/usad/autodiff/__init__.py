"""Minimal reverse-mode differentiation over dense numpy tensors."""

from . import ops
from .nn import Conv1d, Dropout, GroupNorm, Linear, Module, Parameter, count_parameters
from .optim import SGD, Adam, make_optimizer
from .tensor import Graph, GraphError, Tensor, activation_meter, as_tensor, backward, no_grad

__all__ = [
    "Adam", "Conv1d", "Dropout", "Graph", "GraphError", "GroupNorm", "Linear", "Module",
    "Parameter", "SGD", "Tensor", "activation_meter", "as_tensor", "backward",
    "count_parameters", "make_optimizer", "no_grad", "ops",
]
