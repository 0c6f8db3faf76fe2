"""Central finite-difference checks for the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    diff = np.linalg.norm(np.ravel(analytic - numeric))
    scale = max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)), floor)
    return float(diff / scale)


def numeric_grad(fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5,
                 indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``tensor`` (all or selected entries)."""
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    picks = range(flat.size) if indices is None else [np.ravel_multi_index(i, tensor.shape) for i in indices]
    with no_grad():
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            grad[i] = (up - down) / (2.0 * step)
    return grad.reshape(tensor.shape)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> dict[int, float]:
    """Compare tape gradients with central differences.

    Returns the relative error per tensor position.  With ``max_entries`` only a
    random subset of coordinates per tensor is probed.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    rng = rng or np.random.default_rng(0)
    errors = {}
    for pos, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if max_entries is None or t.size <= max_entries:
            numeric = numeric_grad(fn, t, step)
            errors[pos] = relative_error(analytic, numeric)
        else:
            flat_idx = rng.choice(t.size, size=max_entries, replace=False)
            idx = [np.unravel_index(i, t.shape) for i in flat_idx]
            numeric = numeric_grad(fn, t, step, idx).reshape(-1)[flat_idx]
            errors[pos] = relative_error(analytic.reshape(-1)[flat_idx], numeric)
    return errors


def directional_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5,
                      rng: np.random.Generator | None = None) -> float:
    """Relative error of the directional derivative along a random unit direction over all tensors."""
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    backward(fn())
    dirs = [rng.standard_normal(t.shape) for t in tensors]
    norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum(float((t.grad * d).sum()) if t.grad is not None else 0.0 for t, d in zip(tensors, dirs))
    originals = [t.data.copy() for t in tensors]
    with no_grad():
        for t, o, d in zip(tensors, originals, dirs):
            t.data = o + step * d
        up = fn().item()
        for t, o, d in zip(tensors, originals, dirs):
            t.data = o - step * d
        down = fn().item()
    for t, o in zip(tensors, originals):
        t.data = o
    numeric = (up - down) / (2.0 * step)
    return relative_error(np.array([analytic]), np.array([numeric]))
