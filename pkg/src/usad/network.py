"""Multi-branch split-attention classifier and the small 5-channel CNN.

Channel layout inside a split-attention block follows the grouped-conv output
order: the ``K * R`` feature groups are cardinal-major, so group ``k * R + r``
holds split ``r`` of cardinal group ``k``.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Conv1d, Dropout, GroupNorm, Linear, Module, Tensor, activation_meter, no_grad, ops
from .autodiff.nn import count_parameters
from .stats import condition_rows


class ShapeError(ValueError):
    pass


@contextmanager
def _stage(name: str):
    try:
        yield
    except ShapeError:
        raise
    except ValueError as exc:
        raise ShapeError(f"[{name}] {exc}") from exc


@dataclass
class BranchConfig:
    K: int = 2
    R: int = 2
    kernel_sizes: tuple[int, ...] = (3, 5, 7)
    channels: int = 32
    head_hidden: int = 128
    dropout: float = 0.3
    spatial_attn: bool = True
    temporal_attn: bool = True
    spatial_kernel: int = 7
    # "pre_sum": spatial attention on the K*R splits before the cardinal sum;
    # "post_fusion": on the fused cardinal output, after temporal attention.
    spatial_position: str = "pre_sum"

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        if self.K < 1 or self.R < 1:
            raise ShapeError(f"cardinality and radix must be >= 1 (K={self.K}, R={self.R})")
        if self.channels % self.K:
            raise ShapeError(f"channels={self.channels} not divisible by K={self.K}")
        if self.channels % (self.K * self.R):
            raise ShapeError(f"channels={self.channels} not divisible by K*R={self.K * self.R}")
        if self.spatial_position not in ("pre_sum", "post_fusion"):
            raise ShapeError(f"unknown spatial_position {self.spatial_position!r}")

    @property
    def groups(self) -> int:
        return self.K * self.R

    def to_dict(self) -> dict:
        return asdict(self)


def assemble_input(x, f) -> np.ndarray:
    """Stack raw channels and their feature rows: ``(B, C, L), (B, C, 4L) -> (B, 5C, L)``."""
    x = np.asarray(x, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if x.ndim == 2:
        x, f = x[None], f[None]
    if f.shape[-1] != 4 * x.shape[-1] or f.shape[-2] != x.shape[-2]:
        raise ShapeError(f"[input] feature shape {f.shape} does not match window {x.shape} (need C x 4L)")
    return np.concatenate([x, condition_rows(f)], axis=1)


def cardinal_sum(splits) -> Tensor:
    """Element-wise sum of the splits of one cardinal group."""
    splits = list(splits)
    if not splits:
        raise ShapeError("cardinal_sum needs at least one split")
    if len(splits) == 1:
        return ops.reshape(splits[0], splits[0].shape)
    try:
        return ops.add_n(splits)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc


# float64 sigmoid rounds to exactly 0 or 1 beyond |logit| ~ 37; keep R=1 weights strictly inside (0, 1)
_SIGMOID_LO = float(np.finfo(np.float64).tiny)
_SIGMOID_HI = float(np.nextafter(1.0, 0.0))


def radix_weights(logits, R: int) -> Tensor:
    """Soft assignment over splits: softmax along the radix axis when ``R > 1``, sigmoid when ``R == 1``.

    ``logits`` has the radix axis at position ``-2``: ``(..., R, C/K)``.
    """
    if R > 1:
        return ops.softmax(logits, axis=-2)
    return ops.clip(ops.sigmoid(logits), _SIGMOID_LO, _SIGMOID_HI)


def radix_attention(logits, splits, R: int) -> tuple[Tensor, Tensor]:
    """Weights ``a_i(c)`` and the fused ``V_c = sum_i a_i(c) U_i``.

    ``logits``: ``(B, K, R, C/K)``; ``splits``: ``(B, K, R, C/K, L)``.
    """
    a = radix_weights(logits, R)
    fused = ops.sum(splits * ops.reshape(a, a.shape + (1,)), axis=2)
    return a, fused


class SpatialAttention(Module):
    """Map from the ``[avg; max]`` channel descriptor, squashed and broadcast over channels."""

    def __init__(self, rng: np.random.Generator, kernel: int = 7):
        self.conv = Conv1d(2, 1, kernel, rng, padding=kernel // 2)

    def attention_map(self, x) -> Tensor:
        desc = ops.concat([ops.channel_avg_pool(x), ops.channel_max_pool(x)], axis=-2)
        return ops.sigmoid(self.conv(desc))

    def forward(self, x):
        return x * self.attention_map(x)


def _grouped_dense(x, conv: Conv1d) -> Tensor:
    """Grouped fully connected layer realised as a length-1 grouped convolution."""
    out = conv(ops.reshape(x, x.shape + (1,)))
    return ops.reshape(out, out.shape[:-1])


class TemporalAttention(Module):
    """Channel re-weighting from the temporal mean through two K-grouped dense layers."""

    def __init__(self, channels: int, K: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or _hidden(channels, K)
        self.fc1 = Conv1d(channels, hidden, 1, rng, groups=K)
        self.fc2 = Conv1d(hidden, channels, 1, rng, groups=K)

    def weights(self, x) -> Tensor:
        z = ops.mean(x, axis=-1)
        return ops.sigmoid(_grouped_dense(ops.gelu(_grouped_dense(z, self.fc1)), self.fc2))

    def forward(self, x):
        w = self.weights(x)
        return x * ops.reshape(w, w.shape + (1,))


def _hidden(channels: int, K: int) -> int:
    h = max(channels // 2, K)
    return h + (-h) % K


class SplitAttentionBlock(Module):
    """One kernel-size branch: grouped split transforms, spatial attention, cardinal sum,
    radix attention and temporal attention."""

    def __init__(self, in_channels: int, cfg: BranchConfig, kernel: int, rng: np.random.Generator):
        C, K, R = cfg.channels, cfg.K, cfg.R
        if in_channels % cfg.groups:
            raise ShapeError(f"[split] input channels {in_channels} not divisible by K*R={cfg.groups}")
        self.cfg = cfg
        self.transform = Conv1d(in_channels, C * R, kernel, rng, padding=kernel // 2, groups=cfg.groups)
        self.norm = GroupNorm(cfg.groups, C * R)
        hidden = _hidden(C, K)
        self.attn_fc1 = Conv1d(C, hidden, 1, rng, groups=K)
        self.attn_fc2 = Conv1d(hidden, C * R, 1, rng, groups=K)
        self.spatial = SpatialAttention(rng, cfg.spatial_kernel) if cfg.spatial_attn else None
        self.temporal = TemporalAttention(C, K, rng) if cfg.temporal_attn else None

    def forward(self, x) -> Tensor:
        cfg = self.cfg
        C, K, R = cfg.channels, cfg.K, cfg.R
        B, L = x.shape[0], x.shape[-1]
        with _stage("split-transform"):
            U = ops.gelu(self.norm(self.transform(x)))  # B, C*R, L
        if self.spatial is not None and cfg.spatial_position == "pre_sum":
            with _stage("spatial-attention"):
                U = self.spatial(U)
        with _stage("cardinal-sum"):
            splits = ops.reshape(U, (B, K, R, C // K, L))
            card = ops.sum(splits, axis=2)  # B, K, C/K, L
            s = ops.reshape(ops.mean(card, axis=-1), (B, C))
        with _stage("radix-attention"):
            logits = _grouped_dense(ops.gelu(_grouped_dense(s, self.attn_fc1)), self.attn_fc2)
            _, V = radix_attention(ops.reshape(logits, (B, K, R, C // K)), splits, R)
            V = ops.reshape(V, (B, C, L))
        if self.temporal is not None:
            with _stage("temporal-attention"):
                V = self.temporal(V)
        if self.spatial is not None and cfg.spatial_position == "post_fusion":
            with _stage("spatial-attention"):
                V = self.spatial(V)
        return V


class MultiBranchBlock(Module):
    """Parallel split-attention branches, grouped 3-tap fusion and a residual connection."""

    def __init__(self, in_channels: int, cfg: BranchConfig, rng: np.random.Generator):
        C = cfg.channels
        self.branches = [SplitAttentionBlock(in_channels, cfg, k, rng) for k in cfg.kernel_sizes]
        n = len(cfg.kernel_sizes)
        self.fusion = Conv1d(n * C, C, 3, rng, padding=1, groups=cfg.groups)
        self.fusion_norm = GroupNorm(cfg.groups, C)
        self.proj = Conv1d(in_channels, C, 1, rng) if in_channels != C else None

    def forward(self, x) -> Tensor:
        outs = [branch(x) for branch in self.branches]
        with _stage("fusion"):
            fused = self.fusion_norm(self.fusion(ops.concat(outs, axis=1)))
        with _stage("residual"):
            skip = self.proj(x) if self.proj is not None else x
            return ops.gelu(fused + skip)


class ClassifierHead(Module):
    def __init__(self, in_features: int, n_classes: int, rng: np.random.Generator,
                 hidden: int = 128, dropout: float = 0.3, seed: int = 0):
        self.fc1 = Linear(in_features, hidden, rng)
        self.drop = Dropout(dropout, np.random.default_rng(seed))
        self.fc2 = Linear(hidden, n_classes, rng)

    def forward(self, h) -> Tensor:
        z = ops.global_avg_pool(h)
        return self.fc2(self.drop(ops.gelu(self.fc1(z))))


class Classifier(Module):
    """Shared interface: ``forward`` maps assembled ``(B, 5C, L)`` input to logits."""

    n_classes: int
    kind: str

    def proba(self, x, f) -> np.ndarray:
        """Class probabilities for raw windows ``x`` and their features ``f`` (inference mode)."""
        was = self.training
        self.eval()
        try:
            with no_grad():
                out = ops.softmax(self.forward(Tensor(assemble_input(x, f), dtype=self._dtype())), axis=-1).data
        finally:
            self.train(was)
        return out

    def _dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.float64

    def describe(self) -> dict:
        raise NotImplementedError


class USADNet(Classifier):
    kind = "usad"

    def __init__(self, in_channels: int, n_classes: int, cfg: BranchConfig | None = None, seed: int = 0):
        cfg = cfg or BranchConfig()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.stem = Conv1d(5 * in_channels, cfg.channels, 1, rng)
        self.stem_norm = GroupNorm(cfg.groups, cfg.channels)
        self.block = MultiBranchBlock(cfg.channels, cfg, rng)
        self.head = ClassifierHead(cfg.channels, n_classes, rng, cfg.head_hidden, cfg.dropout, seed=seed + 1)

    def forward(self, x) -> Tensor:
        if x.shape[-2] != 5 * self.in_channels:
            raise ShapeError(f"[input] expected {5 * self.in_channels} input rows, got shape {x.shape}")
        with _stage("stem"):
            h = ops.gelu(self.stem_norm(self.stem(x)))
        h = self.block(h)
        with _stage("head"):
            return self.head(h)

    def describe(self) -> dict:
        return {"model.kind": self.kind, "in_channels": self.in_channels, "n_classes": self.n_classes,
                **{f"model.{k}": v for k, v in self.cfg.to_dict().items()}}


class PretrainCNN(Classifier):
    """Three stride-2 conv blocks (k=5, 64 ch, GeLU), global average pool, dense 128, dropout, dense n_c."""

    kind = "cnn5"

    def __init__(self, in_channels: int, n_classes: int, seed: int = 0, width: int = 64,
                 hidden: int = 128, dropout: float = 0.3):
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.width = width
        self.convs = [Conv1d(5 * in_channels if i == 0 else width, width, 5, rng, stride=2, padding=2)
                      for i in range(3)]
        self.head = ClassifierHead(width, n_classes, rng, hidden, dropout, seed=seed + 1)

    def forward(self, x) -> Tensor:
        if x.shape[-2] != 5 * self.in_channels:
            raise ShapeError(f"[input] expected {5 * self.in_channels} input rows, got shape {x.shape}")
        h = x
        for i, conv in enumerate(self.convs):
            with _stage(f"conv{i + 1}"):
                h = ops.gelu(conv(h))
        with _stage("head"):
            return self.head(h)

    def describe(self) -> dict:
        return {"model.kind": self.kind, "in_channels": self.in_channels, "n_classes": self.n_classes,
                "model.width": self.width}


def pretrain_cnn_param_count(in_channels: int, n_classes: int, width: int = 64, hidden: int = 128, k: int = 5) -> int:
    """Closed-form parameter count of :class:`PretrainCNN`."""
    c_in = 5 * in_channels
    convs = (width * c_in * k + width) + 2 * (width * width * k + width)
    return convs + (width * hidden + hidden) + (hidden * n_classes + n_classes)


def estimate_memory(model: Module | None, *example_inputs) -> int:
    """Weight bytes plus the activation bytes one forward pass records on the tape."""
    if model is None:
        return 0
    weights = int(sum(p.data.nbytes for p in model.parameters()))
    if not example_inputs:
        return weights + int(getattr(model, "activation_bytes", 0))
    was = model.training
    model.eval()
    try:
        with activation_meter() as sizes:
            model(*example_inputs)
    finally:
        model.train(was)
    model.activation_bytes = int(sum(sizes))
    return weights + model.activation_bytes


__all__ = [
    "BranchConfig", "Classifier", "ClassifierHead", "MultiBranchBlock", "PretrainCNN", "ShapeError",
    "SpatialAttention", "SplitAttentionBlock", "TemporalAttention", "USADNet", "assemble_input",
    "cardinal_sum", "count_parameters", "estimate_memory", "pretrain_cnn_param_count",
    "radix_attention", "radix_weights",
]
