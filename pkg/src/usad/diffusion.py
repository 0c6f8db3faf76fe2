"""Conditional DDPM for 1D sequences: schedule, AdaGN denoiser, training and sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Adam, Conv1d, Linear, Module, Parameter, Tensor, backward, no_grad, ops
from .data import SequenceSample
from .stats import PrototypeTable, condition_rows

log = logging.getLogger(__name__)

TIME_DIM = 128
WEIGHTINGS = ("capped", "importance", "uniform")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    s: float
    alpha_bar: np.ndarray  # index 0..T
    beta: np.ndarray  # beta[t - 1] is the step-t value
    w: np.ndarray  # w[t - 1] is the step-t importance weight
    squared: bool = False

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"diffusion step out of range 1..{self.T}: {t.min()}..{t.max()}")


def build_schedule(T: int, s: float = 0.008, squared: bool = False, eps_w: float = 1e-8) -> NoiseSchedule:
    """Cosine-ratio schedule.

    ``alpha_bar[t] = cos(pi/2 * (t/T + s)/(1 + s)) / cos(pi/2 * s/(1 + s))``;
    ``squared=True`` switches to the squared-cosine variant for comparison.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < s < 1.0:
        raise ValueError(f"offset s must lie in (0, 1), got {s}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(0.5 * np.pi * (t / T + s) / (1.0 + s))
    f0 = math.cos(0.5 * math.pi * s / (1.0 + s))
    if squared:
        f, f0 = f * f, f0 * f0
    alpha_bar = f / f0
    alpha_bar[0] = 1.0
    alpha_bar = np.maximum(alpha_bar, 0.0)
    beta = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 0.0, 0.999)
    w = importance_weight(alpha_bar[1:], alpha_bar[:-1], eps_w)
    return NoiseSchedule(int(T), float(s), alpha_bar, beta, w, squared)


def importance_weight(ab_t, ab_prev, eps_w: float = 1e-8):
    """``sqrt((1 - ab_t) / (ab_t (1 - ab_prev) + eps_w))``."""
    ab_t, ab_prev = np.asarray(ab_t, dtype=np.float64), np.asarray(ab_prev, dtype=np.float64)
    return np.sqrt((1.0 - ab_t) / (ab_t * (1.0 - ab_prev) + eps_w))


def forward_diffuse(x0, t, noise, sched: NoiseSchedule) -> np.ndarray:
    """``x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise``; ``t`` may be per-sample."""
    sched.check_step(t)
    ab = sched.alpha_bar[np.asarray(t)]
    x0 = np.asarray(x0, dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(noise)


def timestep_embedding(t, dim: int = TIME_DIM) -> np.ndarray:
    """Interleaved ``(sin(t / 10000^(2i/dim)), cos(...))`` pairs, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    args = t[:, None] * freqs[None, :]
    emb = np.empty((t.size, dim))
    emb[:, 0::2] = np.sin(args)
    emb[:, 1::2] = np.cos(args)
    return emb


def adagn_modulate(h, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    """``gamma * groupnorm(h) + beta`` with per-channel ``gamma``/``beta`` of shape ``(B, C)`` or ``(C,)``."""
    normed = ops.group_norm(h, groups, eps)
    gamma, beta = ops.reshape(gamma, gamma.shape + (1,)), ops.reshape(beta, beta.shape + (1,))
    return normed * gamma + beta


class ResBlock(Module):
    def __init__(self, channels: int, cond_dim: int, kernel: int, groups: int, rng: np.random.Generator):
        self.channels = channels
        self.groups = groups
        self.mlp_in = Linear(cond_dim, 2 * channels, rng)
        self.mlp_out = Linear(2 * channels, 2 * channels, rng)
        # start near the identity modulation: gamma ~ 1, beta ~ 0
        self.mlp_out.weight.data *= 0.1
        self.mlp_out.bias.data[:] = 0.0
        self.mlp_out.bias.data[:channels] = 1.0
        self.conv = Conv1d(channels, channels, kernel, rng, padding=kernel // 2)

    def modulation(self, emb) -> tuple[Tensor, Tensor]:
        gb = self.mlp_out(ops.gelu(self.mlp_in(emb)))
        return gb[:, : self.channels], gb[:, self.channels:]

    def forward(self, h, emb):
        gamma, beta = self.modulation(emb)
        return h + self.conv(ops.gelu(adagn_modulate(h, gamma, beta, self.groups)))


class DenoiserNet(Module):
    """Noise predictor ``G(x_t, t, f, y)`` with AdaGN residual blocks.

    The condition rows (``4C x L``) pass through a 1x1 projection that is shared
    between training (per-sample features) and sampling (class prototypes).
    """

    def __init__(self, in_channels: int, n_classes: int, seed: int = 0, channels: int = 32,
                 blocks: int = 3, kernel: int = 5, label_dim: int = 32, groups: int = 8):
        rng = np.random.default_rng(seed)
        self.config = dict(in_channels=in_channels, n_classes=n_classes, channels=channels,
                           blocks=blocks, kernel=kernel, label_dim=label_dim, groups=groups)
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.inp = Conv1d(in_channels, channels, kernel, rng, padding=kernel // 2)
        self.cond = Conv1d(4 * in_channels, channels, 1, rng)
        self.label_emb = Parameter(rng.standard_normal((n_classes, label_dim)) * 0.5)
        self.blocks = [ResBlock(channels, label_dim + TIME_DIM, kernel, groups, rng) for _ in range(blocks)]
        self.out = Conv1d(channels, in_channels, kernel, rng, padding=kernel // 2)
        self.out.weight.data[:] = 0.0
        self.out.bias.data[:] = 0.0

    def embed(self, t, y) -> Tensor:
        y = np.asarray(y, dtype=np.int64)
        if np.any(y < 0) or np.any(y >= self.n_classes):
            raise ValueError(f"unknown label(s) {sorted(set(y.tolist()) - set(range(self.n_classes)))}")
        psi = Tensor(timestep_embedding(t), dtype=self.label_emb.dtype)
        return ops.concat([self.label_emb[y], psi], axis=1)

    def forward(self, x_t, t, cond_rows, y) -> Tensor:
        emb = self.embed(t, y)
        h = self.inp(x_t) + self.cond(cond_rows)
        for block in self.blocks:
            h = block(h, emb)
        return self.out(ops.gelu(h))

    def predict_noise(self, x_t: np.ndarray, t, cond_rows: np.ndarray, y) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(x_t), np.broadcast_to(t, (x_t.shape[0],)), Tensor(cond_rows), y).data


def _stack(samples: Sequence[SequenceSample]):
    X = np.stack([s.x0 for s in samples])
    F = condition_rows(np.stack([s.f for s in samples]))
    Y = np.asarray([s.y for s in samples], dtype=np.int64)
    return X, F, Y


def step_weights(sched: NoiseSchedule, weighting: str = "capped") -> np.ndarray:
    """Per-step loss weights, index ``t - 1``.

    ``importance`` is the raw table.  Its two endpoints are singular (``1 - alpha_bar_0 = 0``
    at t=1 and ``alpha_bar_T ~ 0`` at t=T) and only held finite by ``eps_w``;
    ``capped`` clips them to the largest interior weight.
    """
    if weighting == "importance":
        return sched.w
    if weighting == "uniform":
        return np.ones_like(sched.w)
    if weighting == "capped":
        if sched.T <= 2:
            return np.minimum(sched.w, sched.w.min())
        return np.minimum(sched.w, sched.w[1:-1].max())
    raise ValueError(f"unknown weighting {weighting!r}; expected one of {WEIGHTINGS}")


def denoising_loss(net: DenoiserNet, x0, cond_rows, y, t, noise, sched: NoiseSchedule,
                   weighting: str = "importance") -> Tensor:
    """Batch mean of ``w_t * ||noise - G(x_t, t, f, y)||^2``."""
    x_t = forward_diffuse(x0, t, noise, sched)
    pred = net(Tensor(x_t), t, Tensor(cond_rows), y)
    err = ops.sum((Tensor(noise) - pred) ** 2, axis=(1, 2))
    w = Tensor(step_weights(sched, weighting)[np.asarray(t) - 1])
    return ops.mean(err * w)


@dataclass
class DiffusionTrace:
    epoch_loss: list[float]
    step_loss: list[float]


def train_denoiser(real: Sequence[SequenceSample], sched: NoiseSchedule, net: DenoiserNet, epochs: int,
                   lr: float = 1e-3, seed: int = 0, batch_size: int = 64,
                   weighting: str = "capped") -> DiffusionTrace:
    """Minimise the weighted noise-prediction error with Adam, ``t ~ U{1..T}`` per sample."""
    if not real:
        raise ValueError("train_denoiser: empty dataset")
    X, F, Y = _stack(real)
    rng = np.random.default_rng(seed)
    opt = Adam(net, lr=lr)
    net.train()
    trace = DiffusionTrace([], [])
    n = len(X)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            t = rng.integers(1, sched.T + 1, size=idx.size)
            noise = rng.standard_normal(X[idx].shape)
            loss = denoising_loss(net, X[idx], F[idx], Y[idx], t, noise, sched, weighting)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"denoiser loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            trace.step_loss.append(value)
            total += value * idx.size
        trace.epoch_loss.append(total / n)
        log.debug("diffusion epoch %d loss %.6g", epoch, trace.epoch_loss[-1])
    net.eval()
    return trace


def sample(net, sched: NoiseSchedule, labels, proto: PrototypeTable, rng_seed: int,
           clip_x0: float | None = None, channels: int | None = None) -> np.ndarray:
    """Ancestral DDPM chain from pure noise at ``t = T`` down to ``t = 1``.

    Each step draws from the Gaussian posterior ``q(x_{t-1} | x_t, x0_hat)`` with
    variance ``beta_t`` (no noise at the last step), where ``x0_hat`` is recovered
    from the predicted noise and optionally clipped to ``[-clip_x0, clip_x0]``.
    ``labels`` is one label or a sequence; the chains run as one batch.
    ``net`` is anything with ``predict_noise(x_t, t, cond_rows, y)``.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    cond = np.stack([proto.mean(int(y)) for y in labels])
    if channels is None:
        channels = getattr(net, "in_channels", 1)
    cond = condition_rows(cond.reshape(len(labels), channels, -1))
    rng = np.random.default_rng(rng_seed)
    x = rng.standard_normal((len(labels), channels, cond.shape[-1]))
    ab = sched.alpha_bar
    for t in range(sched.T, 0, -1):
        eps = net.predict_noise(x, t, cond, labels)
        beta = sched.beta[t - 1]
        x0_hat = (x - np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(max(ab[t], 1e-12))
        if clip_x0 is not None:
            x0_hat = np.clip(x0_hat, -clip_x0, clip_x0)
        coef_x0 = np.sqrt(ab[t - 1]) * beta / (1.0 - ab[t])
        coef_xt = np.sqrt(1.0 - beta) * (1.0 - ab[t - 1]) / (1.0 - ab[t])
        mean = coef_x0 * x0_hat + coef_xt * x
        x = mean + np.sqrt(beta) * rng.standard_normal(x.shape) if t > 1 else mean
    return x


def balanced_labels(M: int, labels: Sequence[int]) -> np.ndarray:
    """Round-robin labels so the histogram is as uniform as ``M`` allows."""
    labels = sorted(int(y) for y in labels)
    return np.asarray([labels[k % len(labels)] for k in range(M)], dtype=np.int64)


def synthesize_dataset(net, sched: NoiseSchedule, proto: PrototypeTable, M: int, seed: int,
                       balanced: bool = True, clip_x0: float | None = None, batch_size: int = 256) -> list[SequenceSample]:
    """Generate ``M`` labelled sequences; their features are recomputed from the generated values."""
    if M < 1:
        raise ValueError(f"synthesize_dataset needs M >= 1, got {M}")
    rng = np.random.default_rng(seed)
    if balanced:
        labels = balanced_labels(M, proto.labels)
    else:
        labels = rng.choice(np.asarray(proto.labels), size=M)
    out: list[SequenceSample] = []
    for lo in range(0, M, batch_size):
        chunk = labels[lo:lo + batch_size]
        xs = sample(net, sched, chunk, proto, int(rng.integers(2**63 - 1)), clip_x0=clip_x0)
        out.extend(SequenceSample(x, int(y), source="synthetic") for x, y in zip(xs, chunk))
    return out
