"""Deterministic synthetic scenes: flat-color shapes over procedural
textures, with exact per-patch labels and patch-aligned instance boxes.

Class layout: 12 thing classes (4 shapes x 3 color buckets) followed by 4
stuff classes (one per background texture). Shape pixels use exact 8-bit
colors with a saturated channel, background values stay below 0.85, so patch
labels can be re-derived from pixels alone.
"""

from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from .checkpoint import load_container, save_container
from .errors import DataError
from .regions import Box

SHAPES = ("circle", "square", "triangle", "cross")
# class id = shape * 3 + bucket; each class gets a unique exact color inside
# its hue family so labels are pixel-decidable (one channel saturated at 255,
# backgrounds never exceed 204)
CLASS_COLORS = np.array([
    [255, 51, 38], [51, 255, 64], [38, 77, 255],       # circle  r/g/b
    [255, 115, 38], [115, 255, 38], [102, 38, 255],    # square
    [255, 38, 115], [38, 255, 128], [38, 153, 255],    # triangle
    [255, 166, 77], [77, 255, 166], [128, 102, 255],   # cross
], dtype=np.uint8)
N_BUCKETS = 3
BACKGROUNDS = ("stripes", "checker", "noise", "gradient")
NUM_THING = len(CLASS_COLORS)
NUM_STUFF = len(BACKGROUNDS)
NUM_CLASSES = NUM_THING + NUM_STUFF
IMAGE_SIZE = 64
PATCH = 8
GRID = IMAGE_SIZE // PATCH


@dataclass
class Scene:
    image: np.ndarray          # (3, 64, 64) float32 in [0, 1], 8-bit quantized
    patch_labels: np.ndarray   # (8, 8) uint8 class ids
    instances: list            # [(Box, class_id)]
    scene_histogram: np.ndarray  # (NUM_CLASSES,) sums to 1
    stuff_class: int


def _shape_mask(kind, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "square":
        return np.ones((h, w), dtype=bool)
    if kind == "circle":
        cy, cx = (h - 1) / 2, (w - 1) / 2
        r = min(h, w) / 2
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "triangle":
        # upward triangle, base on the bottom edge
        frac = (h - 1 - yy) / max(h - 1, 1)
        return np.abs(xx - (w - 1) / 2) <= (1 - frac) * (w - 1) / 2
    if kind == "cross":
        bar_h = (yy >= h // 3) & (yy < h - h // 3)
        bar_v = (xx >= w // 3) & (xx < w - w // 3)
        return bar_h | bar_v
    raise DataError(f"unknown shape {kind}")


def _background(kind, rng):
    y = np.arange(IMAGE_SIZE)[:, None, None]
    x = np.arange(IMAGE_SIZE)[None, :, None]
    lo = rng.uniform(0.05, 0.4, size=3)
    hi = rng.uniform(0.45, 0.8, size=3)
    if kind == "stripes":
        period = int(rng.integers(4, 17))
        axis = y if rng.integers(2) else x
        t = ((axis // (period // 2 + 1)) % 2).astype(float)
    elif kind == "checker":
        cell = int(rng.choice([4, 8, 16]))
        t = (((y // cell) + (x // cell)) % 2).astype(float)
    elif kind == "noise":
        t = rng.uniform(0.0, 1.0, size=(IMAGE_SIZE, IMAGE_SIZE, 1))
    elif kind == "gradient":
        axis = y if rng.integers(2) else x
        t = axis / (IMAGE_SIZE - 1)
    else:
        raise DataError(f"unknown background {kind}")
    img = lo + (hi - lo) * t
    return np.clip(np.broadcast_to(img, (IMAGE_SIZE, IMAGE_SIZE, 3)), 0.05, 0.8)


def derive_patch_labels(image, stuff_class):
    """Majority-rule labels recomputed from pixels: a patch belongs to a
    thing class when more than half its pixels carry that exact class color."""
    u8 = np.round(np.asarray(image) * 255).astype(np.uint8)
    labels = np.full((GRID, GRID), stuff_class, dtype=np.uint8)
    hits = np.zeros((NUM_THING, IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    for cls in range(NUM_THING):
        hits[cls] = np.all(u8 == CLASS_COLORS[cls][:, None, None], axis=0)
    for r in range(GRID):
        for col in range(GRID):
            patch = hits[:, r * PATCH:(r + 1) * PATCH, col * PATCH:(col + 1) * PATCH]
            counts = patch.reshape(NUM_THING, -1).sum(axis=1)
            best = int(np.argmax(counts))
            if counts[best] * 2 > PATCH * PATCH:
                labels[r, col] = best
    return labels


def _try_scene(rng):
    bg_idx = int(rng.integers(NUM_STUFF))
    stuff_class = NUM_THING + bg_idx
    img = _background(BACKGROUNDS[bg_idx], rng).copy()
    n_shapes = int(rng.integers(2, 6))
    taken = np.zeros((GRID, GRID), dtype=bool)
    instances = []
    for _ in range(n_shapes):
        placed = False
        for _ in range(100):
            ph = int(rng.integers(2, 4))
            pw = int(rng.integers(2, 4))
            r0 = int(rng.integers(0, GRID - ph + 1))
            c0 = int(rng.integers(0, GRID - pw + 1))
            if taken[r0:r0 + ph, c0:c0 + pw].any():
                continue
            shape_idx = int(rng.integers(len(SHAPES)))
            color_idx = int(rng.integers(N_BUCKETS))
            cls = shape_idx * 3 + color_idx
            mask = _shape_mask(SHAPES[shape_idx], ph * PATCH, pw * PATCH)
            ys, xs = r0 * PATCH, c0 * PATCH
            region = img[ys:ys + ph * PATCH, xs:xs + pw * PATCH]
            region[mask] = CLASS_COLORS[cls] / 255.0
            taken[r0:r0 + ph, c0:c0 + pw] = True
            box = Box(c0 / GRID, r0 / GRID, (c0 + pw) / GRID, (r0 + ph) / GRID)
            instances.append((box, cls))
            placed = True
            break
        if not placed:
            return None
    image = np.round(img * 255).astype(np.uint8).astype(np.float32).transpose(2, 0, 1) / 255.0
    labels = derive_patch_labels(image, stuff_class)
    # every instance must own at least one majority patch for region labels
    for box, cls in instances:
        r0, r1 = round(box.y0 * GRID), round(box.y1 * GRID)
        c0, c1 = round(box.x0 * GRID), round(box.x1 * GRID)
        if not (labels[r0:r1, c0:c1] == cls).any():
            return None
    hist = np.bincount(labels.reshape(-1), minlength=NUM_CLASSES).astype(np.float32)
    hist /= hist.sum()
    return Scene(image=image, patch_labels=labels, instances=instances,
                 scene_histogram=hist, stuff_class=stuff_class)


def generate(seed, count):
    """Deterministic scene list; unplaceable layouts retry with a sub-seed."""
    if count < 1:
        raise DataError(f"count must be >= 1, got {count}")
    scenes = []
    for i in range(count):
        for retry in range(50):
            rng = rng_mod.derive(seed, "scene", f"{i}.{retry}")
            scene = _try_scene(rng)
            if scene is not None:
                break
        else:
            raise DataError(f"scene {i}: could not place shapes after 50 retries")
        scenes.append(scene)
    return scenes


def split_scenes(scenes, val_frac=0.1, test_frac=0.1):
    n = len(scenes)
    n_test = max(1, int(n * test_frac)) if n >= 3 else 0
    n_val = max(1, int(n * val_frac)) if n >= 3 else 0
    train = scenes[: n - n_val - n_test]
    val = scenes[n - n_val - n_test: n - n_test]
    test = scenes[n - n_test:]
    return {"train": train, "val": val, "test": test}


def prototypes(seed, k=NUM_CLASSES, d=32, max_cos=0.3):
    """Seeded unit vectors, rejection-sampled to pairwise |cos| < max_cos."""
    rng = rng_mod.derive(seed, "prototypes")
    out = np.zeros((k, d), dtype=np.float32)
    n = 0
    for _ in range(10000):
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        if n and np.abs(out[:n] @ v).max() >= max_cos:
            continue
        out[n] = v
        n += 1
        if n == k:
            return out
    raise DataError(f"could not draw {k} prototypes with |cos| < {max_cos} in {d} dims")


# -- serialization -------------------------------------------------------------


def save_scenes(path, scenes, seed=None):
    entries = []
    for i, s in enumerate(scenes):
        entries.append((f"scene{i}.image", np.round(s.image * 255).astype(np.uint8)))
        entries.append((f"scene{i}.labels", s.patch_labels.astype(np.uint8)))
        entries.append((f"scene{i}.boxes",
                        np.stack([b.as_array() for b, _ in s.instances])
                        if s.instances else np.zeros((0, 4), np.float32)))
        entries.append((f"scene{i}.classes",
                        np.array([c for _, c in s.instances], dtype=np.uint8)))
        entries.append((f"scene{i}.stuff", np.array([s.stuff_class], dtype=np.uint8)))
    meta = {"count": len(scenes), "classes": NUM_CLASSES, "seed": seed}
    save_container(path, entries, meta)


def load_scenes(path):
    arrays, meta = load_container(path)
    if meta is None or "count" not in meta:
        raise DataError(f"{path}: not a scene container")
    scenes = []
    for i in range(meta["count"]):
        image = arrays[f"scene{i}.image"].astype(np.float32) / 255.0
        labels = arrays[f"scene{i}.labels"]
        boxes = arrays[f"scene{i}.boxes"]
        classes = arrays[f"scene{i}.classes"]
        stuff = int(arrays[f"scene{i}.stuff"][0])
        instances = [(Box(*map(float, boxes[j])), int(classes[j])) for j in range(len(classes))]
        hist = np.bincount(labels.reshape(-1), minlength=NUM_CLASSES).astype(np.float32)
        hist /= hist.sum()
        scenes.append(Scene(image=image, patch_labels=labels, instances=instances,
                            scene_histogram=hist, stuff_class=stuff))
    return scenes, meta


def make_target(seed, patches=2):
    """A small context-free image (one shape on a background) for the
    aggregation probe; dims are patch multiples."""
    rng = rng_mod.derive(seed, "target")
    size = patches * PATCH
    bg = _background(BACKGROUNDS[int(rng.integers(NUM_STUFF))], rng)[:size, :size]
    img = bg.copy()
    shape_idx = int(rng.integers(len(SHAPES)))
    color_idx = int(rng.integers(N_BUCKETS))
    mask = _shape_mask(SHAPES[shape_idx], size, size)
    img[mask] = CLASS_COLORS[shape_idx * 3 + color_idx] / 255.0
    out = np.round(img * 255).astype(np.uint8).astype(np.float32).transpose(2, 0, 1) / 255.0
    return out
