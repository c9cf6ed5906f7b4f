"""Training stages.

Teacher synthesis gives the desk-scale stand-in for a pretrained encoder:
every patch token is trained to align with its class prototype (cosine probe
against the fixed prototype set) while a scene-histogram regression head
with weight eta deliberately leaks global context into the tokens — the
contamination knob the refiner and the coupling-ratio diagnostic measure.

Distillation fine-tunes a student initialized from the teacher with
region-language alignment plus spatial-correlation distillation; SCD targets
come from the raw teacher or from the refiner.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rng_mod
from . import tensor as tt
from .diagnostics import (EncoderPathway, accuracy_table, correlation_divergence,
                          coupling_ratio, per_token_segment, zero_shot_classify)
from .errors import ShapeError, TrainingError
from .losses import rla_loss, sc_rla_loss, scd_loss
from .nn import param
from .optim import AdamW, lr_at, make_optimizer
from .refiner import _refiner_step_loss
from .regions import WHOLE, crop_image, roi_align_multi, roi_pool_multi, sample_proposals
from .synthdata import NUM_CLASSES


@dataclass
class DistillConfig:
    rla_mode: str = "regiontext"    # regiontext | clipself | none
    scd_target: str = "teacher"     # teacher | refined
    lam: float = 0.2
    tau_s: float = 0.2
    tau_t: float = 0.2
    rla_align: str = "cosine"       # cosine | infonce
    rla_temp: float = 0.07
    proposals: int = 8
    epochs: int = 6
    lr: float = 2e-5
    batch: int = 8
    global_scd: bool = False
    e2e: bool = False
    scd_res: int = 4
    pool_res: int = 4
    optimizer: str = "adamw"
    weight_decay: float = 0.05
    lr_schedule: str = "constant"
    scale_min: float = 0.3
    scale_max: float = 0.7
    crops: int = 4                  # refiner crops per image in e2e mode
    refiner_lr: float = 1e-4

    def __post_init__(self):
        if self.rla_mode not in ("regiontext", "clipself", "none"):
            raise ShapeError("distill_config", f"unknown rla_mode {self.rla_mode}")
        if self.scd_target not in ("teacher", "refined"):
            raise ShapeError("distill_config", f"unknown scd_target {self.scd_target}")
        if self.lam < 0 or self.tau_s <= 0 or self.tau_t <= 0:
            raise ShapeError("distill_config", "invalid loss weights")


@dataclass
class RunRecord:
    config: dict
    seed: int
    steps: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)

    def dump(self, path):
        with open(path, "w") as f:
            json.dump({"config": self.config, "seed": self.seed,
                       "checkpoints": self.checkpoints, "steps": self.steps},
                      f, indent=1)


# -- teacher -------------------------------------------------------------------


def _ce_against_prototypes(feats, protos_t, labels, temp):
    logits = tt.mul(tt.matmul(tt.l2_normalize(feats), tt.transpose(protos_t)), 1.0 / temp)
    picked = tt.log_softmax(logits)[(np.arange(len(labels)), labels)]
    return tt.mul(tt.tmean(picked), -1.0)


def pretrain_teacher(scenes, protos, *, eta=0.5, epochs=12, batch=16, lr=1e-3,
                     seed=0, cls_weight=0.5, probe_temp=0.1, weight_decay=0.05,
                     val_scenes=None, log=None, min_acc=0.6):
    """Train a fresh encoder so each patch token classifies its own patch
    (cosine probe on the fixed prototypes), the cls token classifies the
    dominant scene class, and — contamination knob — every token regresses
    the scene class histogram with weight eta."""
    from .vit import Encoder, EncoderConfig

    enc = Encoder(EncoderConfig(), rng_mod.derive(seed, "teacher.init"))
    d = enc.config.dim
    head_rng = rng_mod.derive(seed, "teacher.head")
    wh = param(head_rng.normal(0.0, 0.02, size=(d, NUM_CLASSES)))
    bh = param(np.zeros(NUM_CLASSES))
    protos_t = tt.tensor(protos)
    params = [p for _, p in enc.named_params()] + [wh, bh]
    opt = AdamW(params, lr, weight_decay=weight_decay)
    order_rng = rng_mod.derive(seed, "teacher.order")
    step = 0
    for epoch in range(epochs):
        idx = order_rng.permutation(len(scenes))
        for start in range(0, len(idx), batch):
            sel = idx[start:start + batch]
            images = np.stack([scenes[i].image for i in sel])
            labels = np.stack([scenes[i].patch_labels for i in sel]).reshape(-1)
            hists = np.stack([scenes[i].scene_histogram for i in sel])
            dominant = hists.argmax(axis=1)
            res = enc.encode(images)
            b, l, _ = res.tokens.shape
            flat = tt.reshape(res.tokens, (b * l, d))
            ce_patch = _ce_against_prototypes(flat, protos_t, labels, probe_temp)
            ce_cls = _ce_against_prototypes(res.cls, protos_t, dominant, probe_temp)
            loss = tt.add(ce_patch, tt.mul(ce_cls, cls_weight))
            if eta > 0:
                target = tt.tensor(np.repeat(hists, l, axis=0))
                diff = tt.sub(tt.add_bias(tt.matmul(flat, wh), bh), target)
                loss = tt.add(loss, tt.mul(tt.tmean(tt.tsum(tt.mul(diff, diff), axis=-1)), eta))
            if not np.isfinite(loss.item()):
                raise TrainingError(f"teacher loss diverged at step {step}")
            loss.backward()
            opt.step()
            opt.zero_grad()
            if log is not None:
                log({"step": step, "loss": float(loss.item()), "epoch": epoch})
            step += 1
    metrics = {"steps": step}
    if val_scenes:
        metrics["patch_acc"] = patch_accuracy(enc, val_scenes, protos)
        if metrics["patch_acc"] < min_acc:
            raise TrainingError(
                f"teacher reached only {metrics['patch_acc']:.3f} patch accuracy (< {min_acc})")
    head_state = {"head.hist.w": wh.data.copy(), "head.hist.b": bh.data.copy()}
    return enc, head_state, metrics


def patch_accuracy(encoder, scenes, protos):
    """Top-1 rate of per-token cosine classification against prototypes."""
    pn = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    hit, n = 0, 0
    for start in range(0, len(scenes), 32):
        chunk = scenes[start:start + 32]
        images = np.stack([s.image for s in chunk])
        labels = np.stack([s.patch_labels for s in chunk]).reshape(-1)
        with tt.no_grad():
            toks = encoder.encode(images).tokens.data.reshape(len(labels), -1)
        toks = toks / np.maximum(np.linalg.norm(toks, axis=1, keepdims=True), 1e-12)
        hit += int((np.argmax(toks @ pn.T, axis=1) == labels).sum())
        n += len(labels)
    return hit / max(n, 1)


# -- distillation ----------------------------------------------------------------


def _majority_label(scene, box):
    gh, gw = scene.patch_labels.shape
    r0 = int(np.floor(box.y0 * gh))
    r1 = max(r0 + 1, int(np.ceil(box.y1 * gh)))
    c0 = int(np.floor(box.x0 * gw))
    c1 = max(c0 + 1, int(np.ceil(box.x1 * gw)))
    area = scene.patch_labels[r0:r1, c0:c1].reshape(-1)
    return int(np.bincount(area, minlength=NUM_CLASSES).argmax())


def _batch_boxes(cfg, scenes_batch, box_rng):
    """Half ground-truth instance boxes, half random proposals per image."""
    out = []
    for scene in scenes_batch:
        if cfg.global_scd:
            out.append([(WHOLE, _majority_label(scene, WHOLE))])
            continue
        n_gt = cfg.proposals // 2
        gt = [scene.instances[i % len(scene.instances)] for i in range(n_gt)]
        rand = sample_proposals(box_rng, cfg.proposals - n_gt,
                                (cfg.scale_min, cfg.scale_max)).boxes
        out.append(gt + [(b, _majority_label(scene, b)) for b in rand])
    return out


def distill(teacher, refiner, cfg, scenes, protos, *, seed=0, metrics_path=None,
            log=None):
    """Stage 2: fine-tune a student initialized from the teacher under
    L_RLA + lambda * L_SCD. The teacher stays frozen; the refiner (when
    present) feeds SCD targets only, and trains jointly on its own loss in
    e2e mode."""
    if not teacher.frozen:
        raise ShapeError("distill", "teacher must be frozen")
    if cfg.scd_target == "refined" and refiner is None:
        raise ShapeError("distill", "scd_target=refined requires a refiner")
    student = teacher.clone().unfreeze()
    grid = teacher.config.grid
    size = (teacher.config.image_size, teacher.config.image_size)
    opt = make_optimizer(cfg.optimizer, [p for _, p in student.named_params()],
                         cfg.lr, cfg.weight_decay)
    opt_r = None
    if cfg.e2e:
        if refiner is None:
            raise ShapeError("distill", "e2e requires a refiner")
        refiner.unfreeze()
        opt_r = AdamW([p for _, p in refiner.named_params()], cfg.refiner_lr)
    elif refiner is not None:
        refiner.freeze()
    order_rng = rng_mod.derive(seed, "distill.order")
    box_rng = rng_mod.derive(seed, "distill.boxes")
    crop_rng = rng_mod.derive(seed, "distill.crops")
    record = RunRecord(config=asdict(cfg), seed=seed)
    total_steps = cfg.epochs * max(1, int(np.ceil(len(scenes) / cfg.batch)))
    lines = []
    step = 0
    for epoch in range(cfg.epochs):
        idx = order_rng.permutation(len(scenes))
        for start in range(0, len(idx), cfg.batch):
            sel = idx[start:start + cfg.batch]
            scenes_batch = [scenes[i] for i in sel]
            images = np.stack([s.image for s in scenes_batch])
            boxes_and_labels = _batch_boxes(cfg, scenes_batch, box_rng)
            boxes_only = [[b for b, _ in bl] for bl in boxes_and_labels]

            student_res = student.encode(images)

            # SCD targets
            if cfg.scd_target == "teacher":
                with tt.no_grad():
                    teacher_res = teacher.encode(images)
                    zt = tt.concat([roi_align_multi(teacher_res.tokens[i], grid, bx,
                                                    (cfg.scd_res, cfg.scd_res))
                                    for i, bx in enumerate(boxes_only)], axis=0)
            else:
                with tt.no_grad():
                    zt, _ = refiner.refine_batch(teacher, images, boxes_only,
                                                 (cfg.scd_res, cfg.scd_res))
            zs = tt.concat([roi_align_multi(student_res.tokens[i], grid, bx,
                                            (cfg.scd_res, cfg.scd_res))
                            for i, bx in enumerate(boxes_only)], axis=0)
            l_scd = scd_loss(zs, zt.detach(), cfg.tau_s, cfg.tau_t)

            # RLA branch
            if cfg.rla_mode == "none":
                l_rla = None
                total = l_scd
            else:
                pooled = tt.concat([roi_pool_multi(student_res.tokens[i], grid, bx,
                                                   cfg.pool_res)
                                    for i, bx in enumerate(boxes_only)], axis=0)
                if cfg.rla_mode == "regiontext":
                    sup = np.stack([protos[lab] for bl in boxes_and_labels for _, lab in bl])
                    sup_t = tt.tensor(sup)
                else:
                    crops = np.stack([crop_image(images[i], b, size)
                                      for i, bl in enumerate(boxes_and_labels)
                                      for b, _ in bl])
                    with tt.no_grad():
                        sup_t = teacher.encode(crops).cls.detach()
                l_rla = rla_loss(pooled, sup_t, cfg.rla_align, cfg.rla_temp)
                total = sc_rla_loss(l_rla, l_scd, cfg.lam)

            if not np.isfinite(total.item()):
                raise TrainingError(f"distill loss diverged at step {step}")
            total.backward()
            opt.lr = lr_at(cfg.lr, step, total_steps, cfg.lr_schedule)
            opt.step()
            opt.zero_grad()

            if cfg.e2e:
                crop_boxes = [sample_proposals(crop_rng, cfg.crops,
                                               (cfg.scale_min, cfg.scale_max)).boxes
                              for _ in scenes_batch]
                loss_r = _refiner_step_loss(refiner, teacher, images, crop_boxes,
                                            "g2l", grid)
                loss_r.backward()
                opt_r.step()
                opt_r.zero_grad()

            line = {"step": step,
                    "l_rla": float(l_rla.item()) if l_rla is not None else 0.0,
                    "l_scd": float(l_scd.item()),
                    "total": float(total.item()),
                    "lr": float(opt.lr)}
            record.steps.append(line)
            lines.append(json.dumps(line))
            if log is not None:
                log(line)
            step += 1
    if metrics_path is not None:
        with open(metrics_path, "w") as f:
            f.write("\n".join(lines) + ("\n" if lines else ""))
    return student, record


def evaluate_run(student, teacher, refiner, scenes, protos, *, seed=0,
                 cr_pairs=32, div_boxes=4):
    """Zero-shot dense classification (boxes / thing / stuff), coupling
    ratio, correlation divergence from the teacher, per-token mIoU."""
    box_results, mask_results = [], []
    skipped = 0
    mious = []
    for start in range(0, len(scenes), 16):
        chunk = scenes[start:start + 16]
        images = np.stack([s.image for s in chunk])
        with tt.no_grad():
            res = student.encode(images)
        for i, scene in enumerate(chunk):
            fm = res.feature_map(i)
            r, s = zero_shot_classify(fm, scene, protos, "box")
            box_results += r
            skipped += s
            r, s = zero_shot_classify(fm, scene, protos, "mask")
            mask_results += r
            skipped += s
            mious.append(per_token_segment(fm, protos, scene.patch_labels))

    pairs = [(scenes[2 * i].image, scenes[2 * i + 1].image)
             for i in range(min(cr_pairs, len(scenes) // 2))]
    cr = coupling_ratio(EncoderPathway(student), pairs)

    rng = rng_mod.derive(seed, "eval.divergence")
    images = [s.image for s in scenes[:64]]
    boxes = [sample_proposals(rng, div_boxes).boxes for _ in images]
    divergence = correlation_divergence(student, teacher, images, boxes)

    out = {"boxes": accuracy_table(box_results),
           "masks": accuracy_table(mask_results),
           "miou": float(np.mean(mious)),
           "coupling_ratio": cr.cr,
           "cr_pairs": cr.pair_count,
           "cr_skipped_tokens": cr.skipped_tokens,
           "correlation_divergence": divergence,
           "skipped_regions": skipped}
    return out
