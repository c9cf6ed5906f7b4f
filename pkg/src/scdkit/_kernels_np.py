"""Pure numpy implementations of the hot kernels.

Same contracts as the compiled backend in ``_ckernels.pyx``; selected at
import time by ``scdkit.kernels`` when the extension is absent or disabled.
All functions preserve the input dtype (float32 or float64) and treat the
last axis of 2-d inputs as the reduction axis.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def softmax_fwd(x):
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=1, keepdims=True)


def softmax_bwd(y, g):
    dot = np.sum(g * y, axis=1, keepdims=True)
    return y * (g - dot)


def log_softmax_fwd(x):
    m = np.max(x, axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    return z - lse


def log_softmax_bwd(y, g):
    return g - np.exp(y) * np.sum(g, axis=1, keepdims=True)


def layernorm_fwd(x, gamma, beta, eps):
    mu = np.mean(x, axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    y = xc * rstd * gamma + beta
    return y, mu[:, 0], rstd[:, 0]


def layernorm_bwd(x, gamma, mu, rstd, g):
    xhat = (x - mu[:, None]) * rstd[:, None]
    dgamma = np.sum(g * xhat, axis=0)
    dbeta = np.sum(g, axis=0)
    gx = g * gamma
    m1 = np.mean(gx, axis=1, keepdims=True)
    m2 = np.mean(gx * xhat, axis=1, keepdims=True)
    dx = (gx - m1 - xhat * m2) * rstd[:, None]
    return dx, dgamma, dbeta


def gelu_fwd(x):
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_bwd(x, g):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * np.asarray(_INV_SQRT_2PI, dtype=x.dtype)
    return (g * (cdf + x * pdf)).astype(x.dtype, copy=False)


def _bilinear_corners(h, w, ys, xs):
    # Clamp to the sample-site range, then split into base cell + fraction.
    # Coordinate math stays in float64 regardless of the field dtype.
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1.0)
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1.0)
    y0 = np.minimum(np.floor(ys), h - 2 if h > 1 else 0).astype(np.intp)
    x0 = np.minimum(np.floor(xs), w - 2 if w > 1 else 0).astype(np.intp)
    y0 = np.maximum(y0, 0)
    x0 = np.maximum(x0, 0)
    return y0, x0, ys - y0, xs - x0


def bilinear_fwd(field, ys, xs):
    h, w, _ = field.shape
    y0, x0, fy, fx = _bilinear_corners(h, w, ys, xs)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    w00 = ((1.0 - fy) * (1.0 - fx))[:, None]
    w01 = ((1.0 - fy) * fx)[:, None]
    w10 = (fy * (1.0 - fx))[:, None]
    w11 = (fy * fx)[:, None]
    out = (
        w00 * field[y0, x0]
        + w01 * field[y0, x1]
        + w10 * field[y1, x0]
        + w11 * field[y1, x1]
    )
    return out.astype(field.dtype, copy=False)


def bilinear_bwd(h, w, ys, xs, g):
    d = g.shape[1]
    y0, x0, fy, fx = _bilinear_corners(h, w, ys, xs)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    dfield = np.zeros((h, w, d), dtype=g.dtype)
    np.add.at(dfield, (y0, x0), (((1.0 - fy) * (1.0 - fx))[:, None] * g).astype(g.dtype))
    np.add.at(dfield, (y0, x1), (((1.0 - fy) * fx)[:, None] * g).astype(g.dtype))
    np.add.at(dfield, (y1, x0), ((fy * (1.0 - fx))[:, None] * g).astype(g.dtype))
    np.add.at(dfield, (y1, x1), ((fy * fx)[:, None] * g).astype(g.dtype))
    return dfield
