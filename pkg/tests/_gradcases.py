"""Gradient-check cases shared by the unit tests and the acceptance suite.

Each case builds ``(fn, tensors)`` from a generator: ``fn()`` returns a scalar and
``tensors`` are the leaves to differentiate. Scalars are formed by projecting the op
output on a fixed random tensor so every output entry matters.
"""

import numpy as np

from usad.autodiff import Tensor, ops
from usad.diffusion import DenoiserNet, adagn_modulate
from usad.network import (BranchConfig, MultiBranchBlock, SpatialAttention, TemporalAttention, USADNet,
                          radix_attention)


def _leaf(rng, *shape, low=None, high=None):
    if low is None:
        data = rng.standard_normal(shape)
    else:
        data = rng.uniform(low, high, shape)
    return Tensor(data, requires_grad=True)


def _project(out, rng):
    weights = Tensor(rng.standard_normal(out.shape))
    return lambda o: ops.sum(o * weights)


def _unary(op, **kw):
    def build(rng):
        x = _leaf(rng, 3, 4, **kw)
        proj = _project(op(x), rng)
        return (lambda: proj(op(x))), [x]
    return build


def _binary(op, low_b=None, high_b=None):
    def build(rng):
        a = _leaf(rng, 3, 4)
        b = _leaf(rng, 4, low=low_b, high=high_b) if low_b is not None else _leaf(rng, 4)
        proj = _project(op(a, b), rng)
        return (lambda: proj(op(a, b))), [a, b]
    return build


def _conv(rng):
    x = _leaf(rng, 2, 4, 11)
    k = _leaf(rng, 6, 2, 3)
    b = _leaf(rng, 6)
    f = lambda: ops.conv1d(x, k, b, stride=2, padding=1, groups=2)
    proj = _project(f(), rng)
    return (lambda: proj(f())), [x, k, b]


def _dense(rng):
    x = _leaf(rng, 5, 3)
    w = _leaf(rng, 4, 3)
    b = _leaf(rng, 4)
    proj = _project(ops.dense(x, w, b), rng)
    return (lambda: proj(ops.dense(x, w, b))), [x, w, b]


def _matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    proj = _project(ops.matmul(a, b), rng)
    return (lambda: proj(ops.matmul(a, b))), [a, b]


def _group_norm(rng):
    h = _leaf(rng, 2, 4, 8)
    proj = _project(ops.group_norm(h, 2), rng)
    return (lambda: proj(ops.group_norm(h, 2))), [h]


def _pool(op):
    def build(rng):
        x = _leaf(rng, 2, 3, 7)
        proj = _project(op(x), rng)
        return (lambda: proj(op(x))), [x]
    return build


def _structural(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 3)

    def f():
        cat = ops.concat([a, b], axis=1)
        st = ops.stack([a, b], axis=0)
        tr = ops.transpose(ops.reshape(cat, (3, 4)))
        picked = a[np.array([0, 1, 1]), np.array([2, 0, 0])]
        return ops.sum(tr * tr) + ops.sum(st ** 3) + ops.sum(picked * 2.0) + ops.sum(ops.add_n([a, b, a]) ** 2)
    return f, [a, b]


def _reductions(rng):
    x = _leaf(rng, 3, 5)

    def f():
        return (ops.sum(ops.max(x, axis=1) * 1.7) + ops.sum(ops.mean(x, axis=0) ** 2)
                + ops.sum(ops.sum(x, axis=1) ** 2))
    return f, [x]


def _dropout(rng):
    x = _leaf(rng, 4, 6)
    w = Tensor(rng.standard_normal((4, 6)))
    return (lambda: ops.sum(ops.dropout(x, 0.3, np.random.default_rng(5), True) * w)), [x]


def _adagn(rng):
    h = _leaf(rng, 2, 4, 6)
    g = _leaf(rng, 2, 4)
    b = _leaf(rng, 2, 4)
    proj = _project(adagn_modulate(h, g, b, 2), rng)
    return (lambda: proj(adagn_modulate(h, g, b, 2))), [h, g, b]


def _spatial(rng):
    mod = SpatialAttention(rng)
    x = _leaf(rng, 2, 4, 9)
    proj = _project(mod(x), rng)
    return (lambda: proj(mod(x))), [x, mod.conv.weight, mod.conv.bias]


def _temporal(rng):
    mod = TemporalAttention(8, 2, rng)
    x = _leaf(rng, 2, 8, 5)
    proj = _project(mod(x), rng)
    return (lambda: proj(mod(x))), [x, mod.fc1.weight, mod.fc2.weight, mod.fc2.bias]


def _radix(rng):
    logits = _leaf(rng, 2, 2, 3, 4)
    splits = _leaf(rng, 2, 2, 3, 4, 5)
    f = lambda: radix_attention(logits, splits, 3)[1]
    proj = _project(f(), rng)
    return (lambda: proj(f())), [logits, splits]


def _radix_sigmoid(rng):
    logits = _leaf(rng, 2, 2, 1, 4)
    splits = _leaf(rng, 2, 2, 1, 4, 5)
    f = lambda: radix_attention(logits, splits, 1)[1]
    proj = _project(f(), rng)
    return (lambda: proj(f())), [logits, splits]


def _denoiser(rng):
    net = DenoiserNet(1, 2, seed=int(rng.integers(1 << 30)), channels=8, blocks=1, label_dim=4, groups=2)
    net.out.weight.data = rng.standard_normal(net.out.weight.shape) * 0.3
    x = _leaf(rng, 2, 1, 8)
    cond = Tensor(rng.standard_normal((2, 4, 8)))
    t, y = np.array([3, 7]), np.array([0, 1])
    f = lambda: net(x, t, cond, y)
    proj = _project(f(), rng)
    return (lambda: proj(f())), [x, net.label_emb, net.blocks[0].mlp_in.weight, net.blocks[0].conv.weight]


OP_CASES = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, 0.5, 2.0),
    "neg": _unary(ops.neg),
    "power": _unary(lambda x: ops.power(x, 2.5), low=0.5, high=2.0),
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, low=0.5, high=3.0),
    "sqrt": _unary(ops.sqrt, low=0.5, high=3.0),
    "clip": _unary(lambda x: ops.clip(x, -5.0, 5.0)),
    "relu": _unary(ops.relu, low=0.1, high=2.0),
    "sigmoid": _unary(ops.sigmoid),
    "tanh": _unary(ops.tanh),
    "gelu": _unary(ops.gelu),
    "softmax": _unary(lambda x: ops.softmax(x, axis=-1)),
    "log_softmax": _unary(lambda x: ops.log_softmax(x, axis=0)),
    "reductions": _reductions,
    "structural": _structural,
    "matmul": _matmul,
    "dense": _dense,
    "conv1d": _conv,
    "global_avg_pool": _pool(ops.global_avg_pool),
    "global_max_pool": _pool(ops.global_max_pool),
    "channel_avg_pool": _pool(ops.channel_avg_pool),
    "channel_max_pool": _pool(ops.channel_max_pool),
    "group_norm": _group_norm,
    "dropout": _dropout,
    "adagn": _adagn,
    "spatial_attention": _spatial,
    "temporal_attention": _temporal,
    "radix_attention": _radix,
    "radix_attention_r1": _radix_sigmoid,
    "denoiser": _denoiser,
}


def usad_block_case(rng):
    """Multi-branch split-attention block at K=2, R=2, channels=8, L=16, every parameter probed."""
    cfg = BranchConfig(K=2, R=2, channels=8)
    block = MultiBranchBlock(8, cfg, rng)
    x = _leaf(rng, 2, 8, 16)
    proj = _project(block(x), rng)
    return (lambda: proj(block(x))), [x, *block.parameters()]


def usad_net_case(rng):
    """Whole classifier in inference mode (dropout off) on an assembled 5 x 16 input."""
    net = USADNet(1, 3, BranchConfig(K=2, R=2, channels=8), seed=int(rng.integers(1 << 30)))
    net.eval()
    x = _leaf(rng, 2, 5, 16)
    proj = _project(net(x), rng)
    return (lambda: proj(net(x))), [x, *net.parameters()]
