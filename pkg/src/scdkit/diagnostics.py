"""Measurement suite: coupling ratio, context-aggregation probe, affinity
maps, zero-shot dense classification, per-token segmentation, and
correlation divergence. Everything here is read-only over checkpoints.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from . import tensor as tt
from .errors import RegionError, ShapeError
from .regions import WHOLE, Box, compose_context, roi_align_multi, roi_pool
from .synthdata import NUM_THING


@dataclass
class AffinityMap:
    query: tuple
    values: np.ndarray  # (H', W') cosine similarities in [-1, 1]


@dataclass
class CouplingReport:
    cr: float
    per_pair: list
    pair_count: int
    skipped_tokens: int = 0


def _unit_rows(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if n.min() < 1e-8:
        raise ShapeError("coupling_ratio", "zero-norm token")
    return x / n


class EncoderPathway:
    """Dense tokens for a patch-aligned region straight from the encoder:
    exact sub-grid of forward(image), no interpolation."""

    def __init__(self, encoder):
        self.encoder = encoder

    def region_tokens(self, image, box, out_grid):
        with tt.no_grad():
            fm = self.encoder.forward(image)
        gh, gw = fm.grid
        r0, r1 = box.y0 * gh, box.y1 * gh
        c0, c1 = box.x0 * gw, box.x1 * gw
        for v in (r0, r1, c0, c1):
            if abs(v - round(v)) > 1e-6:
                raise RegionError(f"box {box} not patch-aligned for grid {fm.grid}")
        r0, r1, c0, c1 = (int(round(v)) for v in (r0, r1, c0, c1))
        if (r1 - r0, c1 - c0) != tuple(out_grid):
            raise RegionError(f"box spans {(r1 - r0, c1 - c0)} tokens, expected {out_grid}")
        sub = fm.grid_tensor().data[r0:r1, c0:c1]
        return sub.reshape(-1, sub.shape[-1])


class RefinerPathway:
    """Dense tokens for a region through the refiner (region-conditioned)."""

    def __init__(self, refiner, teacher):
        self.refiner = refiner
        self.teacher = teacher

    def region_tokens(self, image, box, out_grid):
        with tt.no_grad():
            fm = self.refiner.refine(self.teacher, image, box, out_hw=tuple(out_grid))
        return fm.tokens.data


def coupling_ratio(pathway, image_pairs, denom_floor=1e-3):
    """Concatenate each pair side by side and measure how much the shared
    context inflates cross-image token similarity; 1 means no contamination.
    """
    if len(image_pairs) < 1:
        raise ShapeError("coupling_ratio", "need at least one image pair")
    per_pair = []
    skipped = 0
    for img_a, img_b in image_pairs:
        if img_a.shape != img_b.shape:
            raise ShapeError("coupling_ratio", "pair images must share a size")
        _, h, w = img_a.shape
        xab = np.concatenate([img_a, img_b], axis=2)
        grid = (h // 8, w // 8)
        za_ab = _unit_rows(pathway.region_tokens(xab, Box(0.0, 0.0, 0.5, 1.0), grid))
        zb_ab = _unit_rows(pathway.region_tokens(xab, Box(0.5, 0.0, 1.0, 1.0), grid))
        za = _unit_rows(pathway.region_tokens(img_a, WHOLE, grid))
        zb = _unit_rows(pathway.region_tokens(img_b, WHOLE, grid))
        cross = za_ab @ zb_ab.T
        j = np.argmax(cross, axis=1)
        num = cross[np.arange(len(j)), j]
        den = np.sum(za * zb[j], axis=1)
        keep = np.abs(den) >= denom_floor
        skipped += int((~keep).sum())
        if keep.any():
            per_pair.append(float(np.mean(num[keep] / den[keep])))
    if not per_pair:
        raise ShapeError("coupling_ratio", "all tokens skipped")
    return CouplingReport(cr=float(np.mean(per_pair)), per_pair=per_pair,
                          pair_count=len(per_pair), skipped_tokens=skipped)


def aggregate_experiment(encoder, target, contexts, n_values, seed=0):
    """Paste the target into each context at a random patch-aligned spot,
    average the target submaps over the first N contexts, and report the mean
    token distance from the fullest average."""
    n_values = sorted(n_values)
    n_max = n_values[-1]
    if n_max > len(contexts):
        raise ShapeError("aggregate_experiment", f"N={n_max} exceeds {len(contexts)} contexts")
    rng = rng_mod.derive(seed, "aggregate")
    p = encoder.config.patch_size
    submaps = []
    for ctx in contexts[:n_max]:
        xm, box = compose_context(target, ctx, rng, patch_size=p)
        with tt.no_grad():
            fm = encoder.forward(xm)
        gh, gw = fm.grid
        r0, c0 = round(box.y0 * gh), round(box.x0 * gw)
        r1, c1 = round(box.y1 * gh), round(box.x1 * gw)
        submaps.append(fm.grid_tensor().data[r0:r1, c0:c1])
    submaps = np.stack(submaps)
    ref = submaps.mean(axis=0)
    curve = []
    means = {}
    for n in n_values:
        zn = submaps[:n].mean(axis=0)
        means[n] = zn
        curve.append(float(np.linalg.norm(zn - ref, axis=-1).mean()))
    return {"n": list(n_values), "deviation": curve, "means": means}


def affinity_map(feat, query):
    """Cosine of the query token against the whole field."""
    r, c = query
    gh, gw = feat.grid
    if not (0 <= r < gh and 0 <= c < gw):
        raise ShapeError("affinity_map", f"query {query} outside grid {feat.grid}")
    tokens = _unit_rows(np.asarray(feat.tokens.data, dtype=np.float64))
    q = tokens[r * gw + c]
    vals = (tokens @ q).reshape(gh, gw)
    return AffinityMap(query=(r, c), values=vals)


def zero_shot_classify(feat, scene, prototypes, pooling="box"):
    """Classify pooled region vectors by cosine against prototypes.

    Returns per-region (rank_of_true_class, class_id) pairs plus a skip
    count; callers aggregate top-1/top-5 over scenes. ``box`` pools with
    RoIAlign over instance boxes, ``mask`` pools label-selected tokens
    (thing instances and the scene's stuff region).
    """
    protos = prototypes / np.linalg.norm(prototypes, axis=1, keepdims=True)
    results = []
    skipped = 0

    def rank_of(vec, true_cls):
        v = vec / max(np.linalg.norm(vec), 1e-12)
        scores = protos @ v
        order = np.argsort(-scores)
        return int(np.where(order == true_cls)[0][0])

    if pooling == "box":
        for box, cls in scene.instances:
            with tt.no_grad():
                vec = roi_pool(feat, box).data
            results.append((rank_of(vec, cls), cls))
    elif pooling == "mask":
        labels = scene.patch_labels.reshape(-1)
        toks = feat.tokens.data
        for box, cls in scene.instances:
            gh, gw = feat.grid
            r0, r1 = round(box.y0 * gh), round(box.y1 * gh)
            c0, c1 = round(box.x0 * gw), round(box.x1 * gw)
            lab = scene.patch_labels[r0:r1, c0:c1].reshape(-1)
            sub = feat.grid_tensor().data[r0:r1, c0:c1].reshape(len(lab), -1)
            sel = sub[lab == cls]
            if len(sel) == 0:
                skipped += 1
                continue
            results.append((rank_of(sel.mean(axis=0), cls), cls))
        stuff_sel = toks[labels == scene.stuff_class]
        if len(stuff_sel) == 0:
            skipped += 1
        else:
            results.append((rank_of(stuff_sel.mean(axis=0), scene.stuff_class),
                            scene.stuff_class))
    else:
        raise ShapeError("zero_shot_classify", f"unknown pooling {pooling}")
    return results, skipped


def accuracy_table(results):
    """(rank, cls) pairs -> top-1/top-5 overall plus thing/stuff splits."""
    def acc(rows, k):
        return float(np.mean([r < k for r, _ in rows])) if rows else float("nan")

    thing = [rc for rc in results if rc[1] < NUM_THING]
    stuff = [rc for rc in results if rc[1] >= NUM_THING]
    return {
        "top1": acc(results, 1), "top5": acc(results, 5),
        "thing_top1": acc(thing, 1), "thing_top5": acc(thing, 5),
        "stuff_top1": acc(stuff, 1), "stuff_top5": acc(stuff, 5),
        "regions": len(results),
    }


def per_token_segment(feat, prototypes, label_grid):
    """MaskCLIP-style: classify every token independently by cosine; mean IoU
    over the classes present in the label grid."""
    gh, gw = feat.grid
    if label_grid.shape != (gh, gw):
        raise ShapeError("per_token_segment", f"label grid {label_grid.shape} != {feat.grid}")
    protos = prototypes / np.linalg.norm(prototypes, axis=1, keepdims=True)
    toks = np.asarray(feat.tokens.data, dtype=np.float64)
    toks = toks / np.maximum(np.linalg.norm(toks, axis=1, keepdims=True), 1e-12)
    pred = np.argmax(toks @ protos.T, axis=1).reshape(gh, gw)
    ious = []
    for cls in np.unique(label_grid):
        inter = np.logical_and(pred == cls, label_grid == cls).sum()
        union = np.logical_or(pred == cls, label_grid == cls).sum()
        ious.append(inter / union if union else 0.0)
    return float(np.mean(ious))


def correlation_divergence(student, teacher, images, boxes_per_image, tau=0.2, res=4):
    """Mean row-wise Jensen-Shannon divergence between the softmax-normalized
    correlation matrices of student and teacher over sampled regions."""
    if student.config.dim != teacher.config.dim:
        raise ShapeError("correlation_divergence", "encoder configs differ")

    def rows(encoder, image, boxes):
        with tt.no_grad():
            res_e = encoder.encode(image)
            z = roi_align_multi(res_e.tokens[0], res_e.grid, boxes, (res, res)).data
        c = np.einsum("rld,rmd->rlm", z, z) / tau
        c -= c.max(axis=-1, keepdims=True)
        e = np.exp(c)
        return e / e.sum(axis=-1, keepdims=True)

    def kl(p, q):
        return np.sum(p * (np.log(p + 1e-12) - np.log(q + 1e-12)), axis=-1)

    total, count = 0.0, 0
    for image, boxes in zip(images, boxes_per_image):
        ps = rows(student, image, boxes)
        pt = rows(teacher, image, boxes)
        m = 0.5 * (ps + pt)
        js = 0.5 * kl(ps, m) + 0.5 * kl(pt, m)
        total += js.sum()
        count += js.size
    return float(total / max(count, 1))


def write_pgm(path, values):
    """Binary PGM (P5, maxval 255), min-max normalized per map."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi - lo < 1e-12 else (v - lo) / (hi - lo)
    u8 = np.round(scaled * 255).astype(np.uint8)
    h, w = u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.tobytes())
