"""Classification losses and the accuracy-driven composite weighting controller.

Every loss accepts either numpy arrays (returns a float, or an array with
``reduction="none"``) or autodiff tensors (returns a differentiable tensor).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, ops

P_FLOOR = 1e-12


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"focal alpha must be in (0, 1], got {self.alpha}")


@dataclass(frozen=True)
class SmoothingParams:
    epsilon: float = 0.1

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"smoothing epsilon must be in [0, 1), got {self.epsilon}")


@dataclass(frozen=True)
class ClassBalancedParams:
    beta: float
    counts: dict

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise ValueError(f"class-balanced beta must be in [0, 1), got {self.beta}")
        if any(int(n) < 1 for n in self.counts.values()):
            raise ValueError("class-balanced counts must be positive")

    def effective_number(self, label: int) -> float:
        n = int(self.counts[int(label)])
        if self.beta == 0:
            return 1.0
        return (1.0 - self.beta ** n) / (1.0 - self.beta)


def _wrap(x):
    if isinstance(x, Tensor):
        return x, True
    return Tensor(np.asarray(x, dtype=np.float64)), False


def _finish(value: Tensor, as_tensor: bool):
    if as_tensor:
        return value
    return float(value.data) if value.data.ndim == 0 else value.data.copy()


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return ops.mean(per_sample)
    if reduction == "sum":
        return ops.sum(per_sample)
    if reduction == "none":
        return per_sample
    raise ValueError(f"unknown reduction {reduction!r}")


def _labels(y, n: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape[0] != n:
        raise ValueError(f"{y.shape[0]} labels for {n} rows")
    return y


def gather(x: Tensor, y) -> Tensor:
    """``x[i, y_i]`` for a 2-D tensor (or ``x[y]`` for a single row, as length-1)."""
    if x.ndim == 1:
        x = ops.reshape(x, (1, -1))
    y = _labels(y, x.shape[0])
    if np.any(y < 0) or np.any(y >= x.shape[1]):
        raise ValueError(f"label out of range for {x.shape[1]} classes")
    return x[np.arange(x.shape[0]), y]


def cross_entropy(p, y, reduction: str = "mean", diagnostics: dict | None = None):
    """``-log p[y]`` on probability rows; probabilities at or below zero are floored at 1e-12."""
    p, as_tensor = _wrap(p)
    pt = gather(p, y)
    clamped = int(np.sum(pt.data <= P_FLOOR))
    if diagnostics is not None:
        diagnostics["clamped"] = diagnostics.get("clamped", 0) + clamped
    loss = -ops.log(ops.clip(pt, P_FLOOR, None))
    return _finish(_reduce(loss, reduction), as_tensor)


def nll(logp, y, reduction: str = "mean"):
    """``-logp[y]`` on log-probability rows."""
    logp, as_tensor = _wrap(logp)
    return _finish(_reduce(-gather(logp, y), reduction), as_tensor)


def focal_loss(p_t, params: FocalParams = FocalParams(), reduction: str = "mean"):
    """``-alpha (1 - p_t)^gamma log p_t`` for true-class probabilities ``p_t``."""
    p_t, as_tensor = _wrap(p_t)
    pt = ops.clip(p_t, P_FLOOR, None)
    loss = -params.alpha * ops.power(1.0 - pt, params.gamma) * ops.log(pt)
    return _finish(_reduce(loss, reduction), as_tensor)


def label_smoothing_nll(logp, y, params: SmoothingParams = SmoothingParams(), reduction: str = "mean"):
    """Cross-entropy against the smoothed target ``(1 - eps) onehot(y) + eps / K``."""
    logp, as_tensor = _wrap(logp)
    if logp.ndim == 1:
        logp = ops.reshape(logp, (1, -1))
    K = logp.shape[1]
    y = _labels(y, logp.shape[0])
    target = np.full(logp.shape, params.epsilon / K)
    target[np.arange(len(y)), y] += 1.0 - params.epsilon
    loss = -ops.sum(logp * target, axis=1)
    return _finish(_reduce(loss, reduction), as_tensor)


def class_balanced_scales(labels, params: ClassBalancedParams) -> np.ndarray:
    """Per-sample ``1 / E_y`` scales normalized to mean 1 over the batch."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    missing = sorted({int(y) for y in labels} - {int(k) for k in params.counts})
    if missing:
        raise KeyError(f"no class count for labels {missing}")
    raw = np.array([1.0 / params.effective_number(y) for y in labels])
    return raw / raw.mean()


def class_balanced_reweight(loss_per_sample, labels, params: ClassBalancedParams):
    """Mean of per-sample losses scaled by the normalized inverse effective numbers."""
    loss, as_tensor = _wrap(loss_per_sample)
    scales = class_balanced_scales(labels, params)
    return _finish(ops.mean(loss * scales), as_tensor)


@dataclass
class CompositeLossState:
    omega: tuple = (0.33, 0.33, 0.34)
    tau: float = 0.5
    prev_acc: float = 0.0
    temperature: float = 1.0
    bounds: tuple = (0.1, 0.8)
    smoothing: SmoothingParams = SmoothingParams()
    focal: FocalParams = FocalParams()
    class_balanced: ClassBalancedParams | None = None
    adaptive: bool = True
    raw_omega1: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.omega = tuple(float(w) for w in self.omega)
        if len(self.omega) != 3:
            raise ValueError("omega must have three entries")
        lo, hi = self.bounds
        if not 0 <= lo <= hi <= 1 or 3 * lo > 1 + 1e-12 or 3 * hi < 1 - 1e-12:
            raise ValueError(f"infeasible weight bounds {self.bounds}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def _project_box_simplex(w: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Euclidean projection onto ``{sum w = 1, lo <= w <= hi}`` by bisection on the shift."""
    a, b = lo - w.max(), hi - w.min()
    for _ in range(200):
        m = 0.5 * (a + b)
        if np.clip(w + m, lo, hi).sum() > 1.0:
            b = m
        else:
            a = m
    out = np.clip(w + 0.5 * (a + b), lo, hi)
    # absorb the last rounding residue in the entry with the most room
    resid = 1.0 - out.sum()
    room = (hi - out) if resid > 0 else (out - lo)
    out[int(np.argmax(room))] += resid
    return out


def update_weights(state: CompositeLossState, acc: float) -> CompositeLossState:
    """Epoch-level weight update driven by validation accuracy.

    The focal weight target is ``2 - tau - 1 / (acc + 1e-8)``; temperature damps the step from the
    previous focal weight. The other two weights share the remainder equally, then all three are
    clamped to the bounds and projected back onto the simplex.
    """
    acc = float(acc)
    if not 0.0 <= acc <= 1.0:
        raise ValueError(f"accuracy must be in [0, 1], got {acc}")
    lo, hi = state.bounds
    old = state.omega[1]
    target = 2.0 - state.tau - 1.0 / (acc + 1e-8)
    raw = old + (target - old) / state.temperature
    w1 = min(max(raw, lo), hi)
    rest = min(max(0.5 * (1.0 - w1), lo), hi)
    omega = np.array([rest, w1, rest])
    if abs(omega.sum() - 1.0) > 1e-12 or omega.min() < lo or omega.max() > hi:
        omega = _project_box_simplex(omega, lo, hi)
    # informal rule of thumb: improving accuracy should shrink the largest weight
    largest = int(np.argmax(state.omega))
    agrees = (acc <= state.prev_acc) or omega[largest] <= state.omega[largest] + 1e-12
    diagnostics = dict(state.diagnostics, rule_of_thumb_agrees=bool(agrees))
    return replace(state, omega=tuple(float(v) for v in omega), prev_acc=acc, raw_omega1=float(raw),
                   diagnostics=diagnostics)


def component_losses(logits, y, state: CompositeLossState) -> dict:
    """The three weighted terms (and the optional class-balanced one) from raw logits."""
    logits, as_tensor = _wrap(logits)
    logp = ops.log_softmax(logits, axis=-1)
    logpt = gather(logp, y)
    pt = ops.exp(logpt)
    out = {
        "smoothing": label_smoothing_nll(logp, y, state.smoothing),
        "focal": -state.focal.alpha * ops.mean(ops.power(1.0 - pt, state.focal.gamma) * logpt),
        "ce": ops.mean(-logpt),
    }
    if state.class_balanced is not None:
        out["class_balanced"] = class_balanced_reweight(-logpt, y, state.class_balanced)
    if not as_tensor:
        out = {k: float(v.data) for k, v in out.items()}
    return out


def composite_loss(logits, y, state: CompositeLossState):
    """``w0 * smoothing + w1 * focal + w2 * ce`` (plus the class-balanced term when configured)."""
    parts = component_losses(logits, y, state)
    w0, w1, w2 = state.omega
    total = w0 * parts["smoothing"] + w1 * parts["focal"] + w2 * parts["ce"]
    if "class_balanced" in parts:
        total = total + parts["class_balanced"]
    return total


__all__ = [
    "ClassBalancedParams", "CompositeLossState", "FocalParams", "SmoothingParams", "class_balanced_reweight",
    "class_balanced_scales", "component_losses", "composite_loss", "cross_entropy", "focal_loss", "gather",
    "label_smoothing_nll", "nll", "update_weights",
]
