"""Miniature vision transformer encoder with a configurable early/late split.

The encoder is the shared trunk of teacher, student and the refiner: patch
embedding, learned positional embeddings, a class token, pre-norm blocks and
a final layer norm. ``encode_a`` runs the first ``depth - split_k`` blocks
(recording tap outputs), ``encode_b`` the final ``split_k`` blocks plus the
final norm, and their composition equals ``encode`` exactly.

Images wider than the training size are accepted when the width is a whole
multiple of it; positional embeddings are tiled horizontally, keeping
per-tile geometry identical (used by the coupling-ratio probe).
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .errors import NumericsError, ShapeError
from .nn import (Block, BlockStack, LayerNorm, Linear, clone_params, param,
                 repeat_rows, set_requires_grad, trunc_normal)
from .tensor import Tensor


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 32
    depth: int = 6
    heads: int = 4
    split_k: int = 2
    taps: tuple = (2, 4)
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeError("config", f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 1 <= self.split_k < self.depth:
            raise ShapeError("config", f"split_k {self.split_k} outside [1, depth)")
        self.taps = tuple(self.taps)
        if self.taps:
            l1, l2 = self.taps
            if not 1 <= l1 < l2 <= self.depth - self.split_k:
                raise ShapeError("config", f"taps {self.taps} violate 1 <= l1 < l2 <= depth - split_k")

    @property
    def grid(self):
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def tokens_per_image(self):
        g = self.image_size // self.patch_size
        return g * g


@dataclass
class FeatureMap:
    """Per-image token field: optional class token plus a row-major H'xW'
    grid of D-dim tokens."""

    tokens: Tensor
    grid: tuple
    cls: Tensor = None

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.shape[0] != h * w:
            raise ShapeError("feature_map", f"{self.tokens.shape[0]} tokens do not fill grid {self.grid}")

    @property
    def dim(self):
        return self.tokens.shape[-1]

    def grid_tensor(self):
        h, w = self.grid
        return tt.reshape(self.tokens, (h, w, self.dim))


@dataclass
class EncodeResult:
    cls: Tensor          # (B, D)
    tokens: Tensor       # (B, L, D)
    grid: tuple
    taps: dict = field(default_factory=dict)     # layer index -> (B, L, D)
    attn_logits: Tensor = None                   # last-block (B, heads, T, T)

    def feature_map(self, b=0):
        return FeatureMap(tokens=self.tokens[b], grid=self.grid, cls=self.cls[b])


@dataclass
class AState:
    """Early-stage output: the full [cls; patch] sequence plus taps."""

    x: Tensor            # (B, 1+L, D)
    grid: tuple
    taps: dict


class Encoder:
    """Owns the parameters; trainable unless frozen."""

    def __init__(self, config, rng, prefix="vit"):
        self.config = config
        self.prefix = prefix
        self.frozen = False
        d = config.dim
        p = config.patch_size
        self.patch = Linear(rng, 3 * p * p, d)
        self.cls_tok = param(trunc_normal(rng, (d,)))
        t = 1 + config.tokens_per_image
        self.pos = param(trunc_normal(rng, (t, d)))
        self.blocks = [Block(rng, d, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        self.final_ln = LayerNorm(d)

    # -- parameter plumbing -------------------------------------------------

    def named_params(self):
        yield self.prefix + ".patch.w", self.patch.w
        yield self.prefix + ".patch.b", self.patch.b
        yield self.prefix + ".cls", self.cls_tok
        yield self.prefix + ".pos", self.pos
        for i, blk in enumerate(self.blocks):
            yield from blk.named_params(f"{self.prefix}.block{i}")
        yield from self.final_ln.named_params(self.prefix + ".final_ln")

    def parameters(self):
        return OrderedDict(self.named_params())

    def freeze(self):
        self.frozen = True
        set_requires_grad(self.named_params(), False)
        return self

    def unfreeze(self):
        self.frozen = False
        set_requires_grad(self.named_params(), True)
        return self

    def state_dict(self):
        return OrderedDict((n, p.data.copy()) for n, p in self.named_params())

    def load_state_dict(self, state):
        for n, p in self.named_params():
            if n not in state:
                raise ShapeError("load", f"missing parameter {n}")
            arr = np.asarray(state[n], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ShapeError("load", f"{n}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def clone(self, prefix=None):
        twin = Encoder(self.config, np.random.default_rng(0), prefix or self.prefix)
        clone_params(self.named_params(), twin.named_params())
        return twin

    # -- forward stages ------------------------------------------------------

    def _embed(self, images):
        cfg = self.config
        p = cfg.patch_size
        if isinstance(images, Tensor):
            arr = images.data
        else:
            arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ShapeError("forward", f"expected (B, 3, H, W) image, got {arr.shape}")
        b, _, h, w = arr.shape
        if h != cfg.image_size or w % cfg.image_size or w % p or h % p:
            raise ShapeError("forward", f"image {h}x{w} incompatible with size {cfg.image_size}, patch {p}")
        if arr.min() < -1e-6 or arr.max() > 1 + 1e-6:
            raise NumericsError("forward: image values outside [0, 1]")
        gh, gw = h // p, w // p
        x = tt.tensor(arr)
        x = tt.reshape(x, (b, 3, gh, p, gw, p))
        x = tt.transpose(x, (0, 2, 4, 1, 3, 5))
        x = tt.reshape(x, (b, gh * gw, 3 * p * p))
        x = self.patch(x)

        cls = tt.reshape(self.cls_tok, (1, 1, cfg.dim))
        x = tt.concat([repeat_rows(cls, b), x], axis=1)
        x = tt.add(x, repeat_rows(tt.reshape(self._pos_for(gh, gw), (1, 1 + gh * gw, cfg.dim)), b))
        return x, (gh, gw)

    def _pos_for(self, gh, gw):
        tg = self.config.grid
        if (gh, gw) == tg:
            return self.pos
        if gh != tg[0] or gw % tg[1]:
            raise ShapeError("forward", f"grid {gh}x{gw} not a horizontal multiple of {tg}")
        k = gw // tg[1]
        patch_pos = tt.reshape(self.pos[1:, :], (tg[0], tg[1], self.config.dim))
        tiled = tt.concat([patch_pos] * k, axis=1)
        return tt.concat([self.pos[:1, :], tt.reshape(tiled, (gh * gw, self.config.dim))], axis=0)

    def _run_early(self, x):
        taps = {}
        n_a = self.config.depth - self.config.split_k
        for i in range(n_a):
            x, _ = self.blocks[i](x)
            if (i + 1) in self.config.taps:
                taps[i + 1] = x[:, 1:, :]
        return x, taps

    def _run_late(self, x, want_attn=False):
        n_a = self.config.depth - self.config.split_k
        logits = None
        for i in range(n_a, self.config.depth):
            x, lg = self.blocks[i](x, want_attn and i == self.config.depth - 1)
            if lg is not None:
                logits = lg
        return self.final_ln(x), logits

    def encode(self, images, want_attn=False):
        x, grid = self._embed(images)
        x, taps = self._run_early(x)
        x, logits = self._run_late(x, want_attn)
        return EncodeResult(cls=x[:, 0, :], tokens=x[:, 1:, :], grid=grid,
                            taps=taps, attn_logits=logits)

    def encode_a(self, images):
        x, grid = self._embed(images)
        x, taps = self._run_early(x)
        return AState(x=x, grid=grid, taps=taps)

    def encode_b(self, astate, want_attn=False):
        x = astate.x
        if x.shape[-1] != self.config.dim or x.shape[-2] != 1 + astate.grid[0] * astate.grid[1]:
            raise ShapeError("forward_b", f"stage input {x.shape} incompatible with config")
        x, logits = self._run_late(x, want_attn)
        return EncodeResult(cls=x[:, 0, :], tokens=x[:, 1:, :], grid=astate.grid,
                            taps=astate.taps, attn_logits=logits)

    # -- single-image surfaces ------------------------------------------------

    def forward(self, image, want_taps=False):
        res = self.encode(image)
        fm = res.feature_map(0)
        if want_taps:
            return fm, {k: v[0] for k, v in res.taps.items()}
        return fm

    def forward_a(self, image):
        st = self.encode_a(image)
        grid = st.grid
        return FeatureMap(tokens=st.x[0, 1:, :], grid=grid, cls=st.x[0, 0, :])

    def forward_b(self, feat):
        if feat.cls is None:
            raise ShapeError("forward_b", "stage input lacks a cls token")
        x = tt.concat([tt.reshape(feat.cls, (1, feat.dim)), feat.tokens], axis=0)
        st = AState(x=tt.reshape(x, (1,) + x.shape), grid=feat.grid, taps={})
        return self.encode_b(st).feature_map(0)

    def clone_late_blocks(self):
        """Deep copy of the final split_k blocks plus the final norm."""
        cfg = self.config
        rng = np.random.default_rng(0)
        blocks = [Block(rng, cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.split_k)]
        ln = LayerNorm(cfg.dim)
        stack = BlockStack(blocks, ln)
        src = BlockStack(self.blocks[cfg.depth - cfg.split_k:], self.final_ln)
        clone_params(src.named_params("src"), stack.named_params("src"))
        return stack
