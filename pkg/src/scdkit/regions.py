"""Region geometry over token grids and pixels.

Boxes live in normalized [0, 1] image coordinates; conversion to token or
pixel space multiplies by the grid extents, so one convention covers both.
RoIAlign takes one bilinear sample per output cell at the cell center with
token centers as sample sites, which keeps the whole-image box an exact
identity and admits a trivial brute-force oracle.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .errors import RegionError


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise RegionError(f"invalid box ({self.x0}, {self.y0}, {self.x1}, {self.y1})")

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_array(self):
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float32)


WHOLE = Box(0.0, 0.0, 1.0, 1.0)


@dataclass
class ProposalBatch:
    boxes: list
    source: str = "random"   # ground-truth | random | whole-image
    labels: list = field(default_factory=list)   # class ids for ground-truth boxes


def _cell_centers(lo, hi, extent, n):
    # Continuous sample coordinates of n cell centers spanning [lo, hi),
    # expressed with token centers as integer sites.
    return (lo + (np.arange(n) + 0.5) * (hi - lo) / n) * extent - 0.5


def _box_coords(box, grid, out_hw):
    gh, gw = grid
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise RegionError(f"output dims must be >= 1, got {out_hw}")
    if (box.x1 - box.x0) * gw * (box.y1 - box.y0) * gh < 1.0:
        raise RegionError(f"degenerate box: covers less than one grid cell of {grid}")
    ys = _cell_centers(box.y0, box.y1, gh, oh)
    xs = _cell_centers(box.x0, box.x1, gw, ow)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return yy.reshape(-1), xx.reshape(-1)


def roi_align(feat, box, out_hw):
    """Sample a feature map inside a box to an (h, w) grid of tokens.

    ``feat`` is a FeatureMap; the result is a (h*w, D) Tensor, differentiable
    with respect to the feature field.
    """
    yy, xx = _box_coords(box, feat.grid, out_hw)
    return tt.bilinear_sample(feat.grid_tensor(), yy, xx)


def roi_align_multi(field, grid, boxes, out_hw):
    """RoIAlign of several boxes over one (L, D) token tensor; one fused
    sampling call, returns (n_boxes, h*w, D)."""
    gh, gw = grid
    d = field.shape[-1]
    coords = [_box_coords(b, grid, out_hw) for b in boxes]
    yy = np.concatenate([c[0] for c in coords])
    xx = np.concatenate([c[1] for c in coords])
    flat = tt.bilinear_sample(tt.reshape(field, (gh, gw, d)), yy, xx)
    return tt.reshape(flat, (len(boxes), out_hw[0] * out_hw[1], d))


def roi_pool(feat, box, res=4):
    """Average of the (res x res) RoIAlign cells: a D-dim region vector."""
    return tt.tmean(roi_align(feat, box, (res, res)), axis=0)


def roi_pool_multi(field, grid, boxes, res=4):
    return tt.tmean(roi_align_multi(field, grid, boxes, (res, res)), axis=1)


def sample_proposals(rng, count, scale_range=(0.3, 0.7), aspect_range=(0.5, 2.0)):
    """Rejection-sample boxes with area ratio in scale_range and aspect in
    aspect_range, fully inside the image. Deterministic given the rng."""
    smin, smax = scale_range
    if not 0.0 < smin <= smax <= 1.0:
        raise RegionError(f"invalid scale range {scale_range}")
    boxes = []
    trials = 0
    while len(boxes) < count:
        trials += 1
        if trials > 1000 * max(count, 1):
            raise RegionError(f"proposal constraints infeasible: {scale_range}, {aspect_range}")
        s = rng.uniform(smin, smax)
        a = rng.uniform(aspect_range[0], aspect_range[1])
        w = min(np.sqrt(s * a), 1.0)
        h = min(np.sqrt(s / a), 1.0)
        if w * h < smin or w * h > smax:
            continue
        x0 = rng.uniform(0.0, 1.0 - w)
        y0 = rng.uniform(0.0, 1.0 - h)
        boxes.append(Box(float(x0), float(y0), float(min(x0 + w, 1.0)), float(min(y0 + h, 1.0))))
    return ProposalBatch(boxes=boxes, source="random")


def crop_image(image, box, resize_to):
    """Crop the pixel box and bilinearly resize to (h, w). Pure numpy: the
    result feeds frozen-teacher passes, never a gradient path."""
    img = np.asarray(image)
    _, h, w = img.shape
    oh, ow = resize_to
    ys = np.clip(_cell_centers(box.y0, box.y1, h, oh), 0, h - 1)
    xs = np.clip(_cell_centers(box.x0, box.x1, w, ow), 0, w - 1)
    y0 = np.minimum(np.floor(ys), h - 2).astype(int) if h > 1 else np.zeros(oh, int)
    x0 = np.minimum(np.floor(xs), w - 2).astype(int) if w > 1 else np.zeros(ow, int)
    y0 = np.maximum(y0, 0)
    x0 = np.maximum(x0, 0)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    p00 = img[:, y0][:, :, x0]
    p01 = img[:, y0][:, :, x1]
    p10 = img[:, y1][:, :, x0]
    p11 = img[:, y1][:, :, x1]
    out = ((1 - fy) * (1 - fx) * p00 + (1 - fy) * fx * p01
           + fy * (1 - fx) * p10 + fy * fx * p11)
    return out.astype(img.dtype)


def compose_context(target, context, rng, patch_size=8):
    """Paste the target image into the context at a patch-aligned random
    offset; returns the modified image and the normalized placement box."""
    tgt = np.asarray(target)
    ctx = np.asarray(context)
    _, th, tw = tgt.shape
    _, ch, cw = ctx.shape
    if th % patch_size or tw % patch_size:
        raise RegionError(f"target dims {th}x{tw} not multiples of patch {patch_size}")
    if th >= ch or tw >= cw:
        raise RegionError(f"target {th}x{tw} not strictly smaller than context {ch}x{cw}")
    ry = int(rng.integers(0, (ch - th) // patch_size + 1)) * patch_size
    rx = int(rng.integers(0, (cw - tw) // patch_size + 1)) * patch_size
    out = ctx.copy()
    out[:, ry:ry + th, rx:rx + tw] = tgt
    box = Box(rx / cw, ry / ch, (rx + tw) / cw, (ry + th) / ch)
    return out, box
