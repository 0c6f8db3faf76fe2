"""Global/local sequence statistics and label prototypes used for conditioning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MissingLabelError(KeyError):
    pass


@dataclass(frozen=True)
class StatFeatures:
    mu: float
    sigma: float
    gamma: float
    z: np.ndarray

    @property
    def length(self) -> int:
        return int(self.z.shape[0])


def compute_stats(x0, eps: float = 1e-8) -> StatFeatures:
    """Population mean, std, skewness and the z-scored sequence.

    When ``sigma <= eps`` the z vector and skewness are defined as zero.
    """
    x = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("compute_stats: empty sequence")
    if not np.all(np.isfinite(x)):
        raise ValueError("compute_stats: non-finite input")
    if eps <= 0:
        raise ValueError("compute_stats: eps must be positive")
    mu = float(x.mean())
    centered = x - mu
    sigma = float(np.sqrt(np.mean(centered * centered)))
    if sigma <= eps:
        return StatFeatures(mu, sigma, 0.0, np.zeros_like(x))
    z = centered / sigma
    gamma = float(np.mean(z * z * z))
    return StatFeatures(mu, sigma, gamma, z)


def build_condition_vector(s: StatFeatures) -> np.ndarray:
    """``[mu]*L + [sigma]*L + [gamma]*L + z``, length ``4L``."""
    L = s.length
    return np.concatenate([np.full(L, s.mu), np.full(L, s.sigma), np.full(L, s.gamma), s.z])


def condition_vectors(x0, eps: float = 1e-8) -> np.ndarray:
    """Per-channel condition vectors of a ``(C, L)`` window, shape ``(C, 4L)``."""
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    return np.stack([build_condition_vector(compute_stats(row, eps)) for row in x])


def condition_rows(f: np.ndarray) -> np.ndarray:
    """Reshape per-channel vectors ``(..., C, 4L)`` into feature rows ``(..., 4C, L)``.

    Rows for channel ``c`` are ``4c .. 4c+3`` holding mu, sigma, gamma and z.
    """
    f = np.asarray(f)
    *lead, C, four_l = f.shape
    if four_l % 4:
        raise ValueError(f"condition vector length {four_l} is not a multiple of 4")
    return f.reshape(*lead, C * 4, four_l // 4)


@dataclass
class PrototypeTable:
    """Mean condition vector per label."""

    means: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    @property
    def labels(self) -> list[int]:
        return sorted(self.means)

    def mean(self, label: int) -> np.ndarray:
        try:
            return self.means[int(label)]
        except KeyError:
            raise MissingLabelError(f"no prototype for label {label}; known labels {self.labels}") from None

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for y in self.labels:
            out[f"proto/{y}"] = self.means[y]
            out[f"proto_count/{y}"] = np.array([self.counts[y]], dtype=np.int64)
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "PrototypeTable":
        table = cls()
        for name, arr in tensors.items():
            if name.startswith("proto/"):
                y = int(name.split("/", 1)[1])
                table.means[y] = np.asarray(arr, dtype=np.float64)
                table.counts[y] = int(tensors.get(f"proto_count/{y}", np.array([1]))[0])
        return table


def fit_prototypes(dataset) -> PrototypeTable:
    """Group-average the condition vectors of ``(f, y)`` pairs."""
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for f, y in dataset:
        y = int(y)
        f = np.asarray(f, dtype=np.float64)
        if y in sums:
            if sums[y].shape != f.shape:
                raise ValueError(f"inconsistent condition vector shape for label {y}")
            sums[y] = sums[y] + f
            counts[y] += 1
        else:
            sums[y] = f.copy()
            counts[y] = 1
    if not sums:
        raise ValueError("fit_prototypes: empty dataset")
    return PrototypeTable({y: sums[y] / counts[y] for y in sums}, counts)
