"""Transformer building blocks on the tape: linear, layer norm, multi-head
attention and the pre-norm residual block. Each layer owns its parameter
tensors and yields (name, tensor) pairs for checkpointing and optimizers.
"""

import numpy as np

from . import tensor as tt
from .errors import ShapeError
from .tensor import Tensor


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) with resampling outside 2 std."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def param(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=tt.default_dtype()), requires_grad=requires_grad)


class Linear:
    def __init__(self, rng, d_in, d_out, zero=False):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = trunc_normal(rng, (d_in, d_out))
        self.w = param(w)
        self.b = param(np.zeros(d_out))

    def __call__(self, x):
        return tt.add_bias(tt.matmul(x, self.w), self.b)

    def named_params(self, prefix):
        yield prefix + ".w", self.w
        yield prefix + ".b", self.b


class LayerNorm:
    def __init__(self, dim, eps=1e-5):
        self.g = param(np.ones(dim))
        self.b = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return tt.layer_norm(x, self.g, self.b, self.eps)

    def named_params(self, prefix):
        yield prefix + ".g", self.g
        yield prefix + ".b", self.b


class Mlp:
    def __init__(self, rng, dim, hidden):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x):
        return self.fc2(tt.gelu(self.fc1(x)))

    def named_params(self, prefix):
        yield from self.fc1.named_params(prefix + ".fc1")
        yield from self.fc2.named_params(prefix + ".fc2")


class Attention:
    def __init__(self, rng, dim, heads):
        if dim % heads:
            raise ShapeError("attention", f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def _split(self, x, b, t):
        # (B, T, D) -> (B, heads, T, head_dim)
        return tt.transpose(tt.reshape(x, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x, want_logits=False):
        b, t, d = x.shape
        q = self._split(self.wq(x), b, t)
        k = self._split(self.wk(x), b, t)
        v = self._split(self.wv(x), b, t)
        logits = tt.mul(tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))), self.scale)
        attn = tt.softmax(logits)
        out = tt.matmul(attn, v)
        out = tt.reshape(tt.transpose(out, (0, 2, 1, 3)), (b, t, d))
        out = self.wo(out)
        return (out, logits) if want_logits else (out, None)

    def named_params(self, prefix):
        for n, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            yield from lin.named_params(f"{prefix}.{n}")


class Block:
    """Pre-norm: x + attn(ln(x)); x + mlp(ln(x))."""

    def __init__(self, rng, dim, heads, mlp_ratio=4):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, dim * mlp_ratio)

    def __call__(self, x, want_logits=False):
        a, logits = self.attn(self.ln1(x), want_logits)
        x = tt.add(x, a)
        x = tt.add(x, self.mlp(self.ln2(x)))
        return x, logits

    def named_params(self, prefix):
        yield from self.ln1.named_params(prefix + ".ln1")
        yield from self.attn.named_params(prefix + ".attn")
        yield from self.ln2.named_params(prefix + ".ln2")
        yield from self.mlp.named_params(prefix + ".mlp")


class BlockStack:
    """A run of residual blocks plus a trailing layer norm; the shape of an
    encoder's late stage and of the refiner trunk."""

    def __init__(self, blocks, final_ln):
        self.blocks = list(blocks)
        self.final_ln = final_ln

    def __call__(self, x, want_logits=False):
        logits = None
        for i, blk in enumerate(self.blocks):
            x, lg = blk(x, want_logits and i == len(self.blocks) - 1)
            if lg is not None:
                logits = lg
        return self.final_ln(x), logits

    def named_params(self, prefix):
        for i, blk in enumerate(self.blocks):
            yield from blk.named_params(f"{prefix}.block{i}")
        yield from self.final_ln.named_params(prefix + ".final_ln")


def set_requires_grad(named_params, flag):
    for _, p in named_params:
        p.requires_grad = flag
        if not flag:
            p.grad = None


def clone_params(src_named, dst_named):
    """Copy values between layers with identical structure."""
    src = list(src_named)
    dst = list(dst_named)
    if len(src) != len(dst):
        raise ShapeError("clone", f"param count mismatch {len(src)} vs {len(dst)}")
    for (_, s), (_, d) in zip(src, dst):
        if s.data.shape != d.data.shape:
            raise ShapeError("clone", f"param shape mismatch {s.data.shape} vs {d.data.shape}")
        d.data = s.data.copy()


def repeat_rows(t, n):
    """(1, ...) -> (n, ...) by concatenating n tape-tracked copies."""
    if n == 1:
        return t
    return tt.concat([t] * n, axis=0)
