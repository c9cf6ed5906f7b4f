"""The Refiner: a trainable stack cloned from the encoder's late blocks that
turns (image, region box) into context-decontaminated region features.

Pathway: the frozen teacher's early stage produces the dense field plus tap
outputs; an intermediate processor (2D -> hidden -> D MLP over concatenated
taps) augments the field; RoIAlign cuts the region; a region-level cls token
(global cls plus an MLP correction from RoI-pooled early features) is
prepended; the trunk re-processes the sequence. Both auxiliary-head output
layers are zero-initialized, so a clone-initialized Refiner starts as the
exact teacher pathway and training departs smoothly.
"""

from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from . import tensor as tt
from .errors import ShapeError, TrainingError
from .losses import refiner_loss
from .nn import Block, BlockStack, LayerNorm, Linear, repeat_rows, set_requires_grad
from .optim import make_optimizer
from .regions import WHOLE, crop_image, roi_align_multi, roi_pool_multi, sample_proposals
from .vit import FeatureMap


@dataclass
class RefinerConfig:
    depth_k: int = None          # default: encoder split_k
    init: str = "clone"          # clone | random | exogenous
    hidden: int = 128
    late_variant: bool = False
    aux_heads: bool = True
    loss_mode: str = "infonce"   # infonce | cosine
    temp: float = 0.1
    pool_res: int = 4

    def __post_init__(self):
        if self.init not in ("clone", "random", "exogenous"):
            raise ShapeError("refiner_config", f"unknown init {self.init}")


class Refiner:
    def __init__(self, config, teacher, rng=None):
        cfg = teacher.config
        self.config = config
        self.enc_config = cfg
        if config.depth_k is None:
            config.depth_k = cfg.split_k
        if config.init == "clone":
            if config.depth_k != cfg.split_k:
                raise ShapeError("refiner", f"clone init needs depth_k == split_k "
                                            f"({config.depth_k} != {cfg.split_k})")
            self.trunk = teacher.clone_late_blocks()
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            blocks = [Block(rng, cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(config.depth_k)]
            self.trunk = BlockStack(blocks, LayerNorm(cfg.dim))
        rng = rng if rng is not None else np.random.default_rng(0)
        d = cfg.dim
        self.fc_inter = None
        self.fc_cls = None
        if config.aux_heads:
            if not cfg.taps:
                raise ShapeError("refiner", "aux heads need encoder taps")
            self.fc_inter = (Linear(rng, 2 * d, config.hidden), Linear(rng, config.hidden, d, zero=True))
            self.fc_cls = (Linear(rng, d, config.hidden), Linear(rng, config.hidden, d, zero=True))

    # -- parameters -----------------------------------------------------------

    def named_params(self):
        yield from self.trunk.named_params("refiner.trunk")
        if self.fc_inter is not None:
            yield from self.fc_inter[0].named_params("refiner.fc_inter.fc1")
            yield from self.fc_inter[1].named_params("refiner.fc_inter.fc2")
            yield from self.fc_cls[0].named_params("refiner.fc_cls.fc1")
            yield from self.fc_cls[1].named_params("refiner.fc_cls.fc2")

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.named_params()}

    def load_state_dict(self, state):
        for n, p in self.named_params():
            if n not in state:
                raise ShapeError("load", f"missing parameter {n}")
            arr = np.asarray(state[n], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ShapeError("load", f"{n}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def freeze(self):
        set_requires_grad(self.named_params(), False)
        return self

    def unfreeze(self):
        set_requires_grad(self.named_params(), True)
        return self

    def _mlp(self, head, x):
        return head[1](tt.gelu(head[0](x)))

    # -- forward ---------------------------------------------------------------

    def _base(self, teacher, images):
        """Frozen-teacher stage feeding the trunk: early blocks for clone and
        random init, the full encoder for exogenous."""
        with tt.no_grad():
            if self.config.init == "exogenous":
                res = teacher.encode(images)
                return res.tokens, res.cls, res.taps, res.grid
            st = teacher.encode_a(images)
            return st.x[:, 1:, :], st.x[:, 0, :], st.taps, st.grid

    def refine_batch(self, teacher, images, boxes_per_image, out_hw):
        """Refine several regions of several images in one trunk pass.
        Returns (tokens (sum R, h*w, D), cls (sum R, D))."""
        tokens, cls, taps, grid = self._base(teacher, images)
        b, l, d = tokens.shape
        if self.fc_inter is not None:
            l1, l2 = self.enc_config.taps
            z_inter = self._mlp(self.fc_inter, tt.concat([taps[l1], taps[l2]], axis=-1))
            dense = tt.add(tokens, z_inter)
        else:
            dense = tokens
        seqs = []
        for i, boxes in enumerate(boxes_per_image):
            if not boxes:
                continue
            r = len(boxes)
            cls_i = repeat_rows(tt.reshape(cls[i], (1, d)), r)
            if self.fc_cls is not None:
                pooled = roi_pool_multi(tokens[i], grid, boxes, self.config.pool_res)
                cls_i = tt.add(cls_i, self._mlp(self.fc_cls, pooled))
            if self.config.late_variant:
                field = repeat_rows(tt.reshape(dense[i], (1, l, d)), r)
                seq = tt.concat([tt.reshape(cls_i, (r, 1, d)), field], axis=1)
            else:
                region = roi_align_multi(dense[i], grid, boxes, out_hw)
                seq = tt.concat([tt.reshape(cls_i, (r, 1, d)), region], axis=1)
            seqs.append(seq)
        seq = tt.concat(seqs, axis=0) if len(seqs) > 1 else seqs[0]
        out, _ = self.trunk(seq)
        out_cls = out[:, 0, :]
        out_tokens = out[:, 1:, :]
        if self.config.late_variant:
            flat = []
            row = 0
            for i, boxes in enumerate(boxes_per_image):
                for box in boxes:
                    flat.append(roi_align_multi(out_tokens[row], grid, [box], out_hw)[0])
                    row += 1
            out_tokens = tt.stack(flat, axis=0)
        return out_tokens, out_cls

    def refine(self, teacher, image, box, out_hw=None):
        """Single-region surface: refined FeatureMap (tokens + region cls)."""
        if out_hw is None:
            g = self.enc_config.grid
            out_hw = g
        toks, cls = self.refine_batch(teacher, image, [[box]], out_hw)
        return FeatureMap(tokens=toks[0], grid=out_hw, cls=cls[0])


def train_refiner(refiner, teacher, scenes, *, epochs=4, batch=8, lr=1e-4,
                  optimizer="adamw", crops=4, scale_range=(0.3, 0.7),
                  direction="g2l", seed=0, val_scenes=None, log=None):
    """Stage 1: global-to-local alignment against frozen-teacher crops.

    ``direction='l2g'`` reverses the pairing (refiner sees the context-free
    crop, targets come from the contaminated global map) — kept to reproduce
    its degradation.
    """
    if direction not in ("g2l", "l2g"):
        raise ShapeError("train_refiner", f"unknown direction {direction}")
    if not teacher.frozen:
        raise ShapeError("train_refiner", "teacher must be frozen")
    cfg = refiner.config
    enc_cfg = teacher.config
    grid = enc_cfg.grid
    params = [p for _, p in refiner.named_params()]
    opt = make_optimizer(optimizer, params, lr)
    history = []
    step = 0
    order_rng = rng_mod.derive(seed, "refiner.order")
    box_rng = rng_mod.derive(seed, "refiner.boxes")
    for epoch in range(epochs):
        idx = order_rng.permutation(len(scenes))
        for start in range(0, len(idx), batch):
            sel = idx[start:start + batch]
            images = np.stack([scenes[i].image for i in sel])
            boxes = [sample_proposals(box_rng, crops, scale_range).boxes for _ in sel]
            loss = _refiner_step_loss(refiner, teacher, images, boxes, direction, grid)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"refiner loss diverged at step {step}")
            loss.backward()
            opt.step()
            opt.zero_grad()
            history.append(float(loss.item()))
            if log is not None:
                log({"step": step, "loss": float(loss.item()), "epoch": epoch})
            step += 1
    metrics = {"loss_first": history[0] if history else None,
               "loss_last": history[-1] if history else None}
    if val_scenes:
        metrics["val_loss"] = evaluate_refiner_loss(refiner, teacher, val_scenes, crops=crops,
                                                    scale_range=scale_range, seed=seed + 1,
                                                    direction=direction)
    return metrics


def _refiner_step_loss(refiner, teacher, images, boxes_per_image, direction, grid):
    cfg = teacher.config
    size = (cfg.image_size, cfg.image_size)
    out_hw = grid
    crops_np = np.stack([crop_image(img, box, size)
                         for img, boxes in zip(images, boxes_per_image) for box in boxes])
    if direction == "g2l":
        refined, _ = refiner.refine_batch(teacher, images, boxes_per_image, out_hw)
        with tt.no_grad():
            targets = teacher.encode(crops_np).tokens
    else:
        whole = [[WHOLE] for _ in range(len(crops_np))]
        refined, _ = refiner.refine_batch(teacher, crops_np, whole, out_hw)
        with tt.no_grad():
            res = teacher.encode(images)
            per_box = []
            for i, boxes in enumerate(boxes_per_image):
                per_box.append(roi_align_multi(res.tokens[i], grid, boxes, out_hw))
            targets = tt.concat(per_box, axis=0)
    return refiner_loss(refined, targets.detach(), refiner.config.loss_mode, refiner.config.temp)


def evaluate_refiner_loss(refiner, teacher, scenes, *, crops=4, scale_range=(0.3, 0.7),
                          seed=0, direction="g2l"):
    """Held-out refining loss; no parameter updates."""
    grid = teacher.config.grid
    box_rng = rng_mod.derive(seed, "refiner.eval")
    total, n = 0.0, 0
    for start in range(0, len(scenes), 8):
        chunk = scenes[start:start + 8]
        images = np.stack([s.image for s in chunk])
        boxes = [sample_proposals(box_rng, crops, scale_range).boxes for _ in chunk]
        was = [p.requires_grad for _, p in refiner.named_params()]
        refiner.freeze()
        loss = _refiner_step_loss(refiner, teacher, images, boxes, direction, grid)
        for flag, (_, p) in zip(was, refiner.named_params()):
            p.requires_grad = flag
        total += loss.item() * len(chunk)
        n += len(chunk)
    return total / max(n, 1)
