# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: softmax / log-softmax, layer norm, GELU and bilinear
sampling, each with its exact backward. Contracts match ``_kernels_np``.
Rows of 2-d inputs are independent; reductions run over the last axis and
accumulate in double regardless of the storage type.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, floor, log, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double

DEF INV_SQRT2 = 0.7071067811865476
DEF INV_SQRT_2PI = 0.3989422804014327


def softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out_arr = np.empty((n, m), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] y = out_arr
    cdef double mx, s
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            y[i, j] = <real> exp(x[i, j] - mx)
            s += y[i, j]
        for j in range(m):
            y[i, j] = <real> (y[i, j] / s)
    return out_arr


def softmax_bwd(real[:, ::1] y, real[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out_arr = np.empty((n, m), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] dx = out_arr
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += g[i, j] * y[i, j]
        for j in range(m):
            dx[i, j] = <real> (y[i, j] * (g[i, j] - dot))
    return out_arr


def log_softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out_arr = np.empty((n, m), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] y = out_arr
    cdef double mx, s
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            s += exp(x[i, j] - mx)
        s = log(s)
        for j in range(m):
            y[i, j] = <real> (x[i, j] - mx - s)
    return out_arr


def log_softmax_bwd(real[:, ::1] y, real[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out_arr = np.empty((n, m), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] dx = out_arr
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += g[i, j]
        for j in range(m):
            dx[i, j] = <real> (g[i, j] - exp(y[i, j]) * s)
    return out_arr


def layernorm_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    dt = np.asarray(x).dtype
    y_arr = np.empty((n, m), dtype=dt)
    mu_arr = np.empty(n, dtype=dt)
    rstd_arr = np.empty(n, dtype=dt)
    cdef real[:, ::1] y = y_arr
    cdef real[::1] mu = mu_arr, rstd = rstd_arr
    cdef double s, v, d, r
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += x[i, j]
        s /= m
        v = 0.0
        for j in range(m):
            d = x[i, j] - s
            v += d * d
        v /= m
        r = 1.0 / sqrt(v + eps)
        mu[i] = <real> s
        rstd[i] = <real> r
        for j in range(m):
            y[i, j] = <real> ((x[i, j] - s) * r * gamma[j] + beta[j])
    return y_arr, mu_arr, rstd_arr


def layernorm_bwd(real[:, ::1] x, real[::1] gamma, real[::1] mu,
                  real[::1] rstd, real[:, ::1] g):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    dt = np.asarray(x).dtype
    dx_arr = np.empty((n, m), dtype=dt)
    dgamma_arr = np.zeros(m, dtype=dt)
    dbeta_arr = np.zeros(m, dtype=dt)
    cdef real[:, ::1] dx = dx_arr
    cdef real[::1] dgamma = dgamma_arr, dbeta = dbeta_arr
    cdef double m1, m2, xh, gx
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(m):
            xh = (x[i, j] - mu[i]) * rstd[i]
            gx = g[i, j] * gamma[j]
            m1 += gx
            m2 += gx * xh
            dgamma[j] += <real> (g[i, j] * xh)
            dbeta[j] += g[i, j]
        m1 /= m
        m2 /= m
        for j in range(m):
            xh = (x[i, j] - mu[i]) * rstd[i]
            gx = g[i, j] * gamma[j]
            dx[i, j] = <real> ((gx - m1 - xh * m2) * rstd[i])
    return dx_arr, dgamma_arr, dbeta_arr


def gelu_fwd(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(n, dtype=np.asarray(x).dtype)
    cdef real[::1] y = out_arr
    for i in range(n):
        y[i] = <real> (0.5 * x[i] * (1.0 + erf(x[i] * INV_SQRT2)))
    return out_arr


def gelu_bwd(real[::1] x, real[::1] g):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(n, dtype=np.asarray(x).dtype)
    cdef real[::1] dx = out_arr
    cdef double cdf, pdf
    for i in range(n):
        cdf = 0.5 * (1.0 + erf(x[i] * INV_SQRT2))
        pdf = exp(-0.5 * x[i] * x[i]) * INV_SQRT_2PI
        dx[i] = <real> (g[i] * (cdf + x[i] * pdf))
    return out_arr


cdef inline void _corner(double c, Py_ssize_t extent, Py_ssize_t* c0,
                         double* fc) nogil:
    if c < 0.0:
        c = 0.0
    if c > extent - 1.0:
        c = extent - 1.0
    c0[0] = <Py_ssize_t> floor(c)
    if c0[0] > extent - 2:
        c0[0] = extent - 2
    if c0[0] < 0:
        c0[0] = 0
    fc[0] = c - c0[0]


def bilinear_fwd(real[:, :, ::1] field, double[::1] ys, double[::1] xs):
    cdef Py_ssize_t h = field.shape[0], w = field.shape[1], d = field.shape[2]
    cdef Py_ssize_t n = ys.shape[0], i, k, y0, x0, y1, x1
    out_arr = np.empty((n, d), dtype=np.asarray(field).dtype)
    cdef real[:, ::1] out = out_arr
    cdef double fy, fx, w00, w01, w10, w11
    for i in range(n):
        _corner(ys[i], h, &y0, &fy)
        _corner(xs[i], w, &x0, &fx)
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        x1 = x0 + 1 if x0 + 1 < w else w - 1
        w00 = (1.0 - fy) * (1.0 - fx)
        w01 = (1.0 - fy) * fx
        w10 = fy * (1.0 - fx)
        w11 = fy * fx
        for k in range(d):
            out[i, k] = <real> (w00 * field[y0, x0, k] + w01 * field[y0, x1, k]
                                + w10 * field[y1, x0, k] + w11 * field[y1, x1, k])
    return out_arr


def bilinear_bwd(Py_ssize_t h, Py_ssize_t w, double[::1] ys, double[::1] xs,
                 real[:, ::1] g):
    cdef Py_ssize_t n = ys.shape[0], d = g.shape[1], i, k, y0, x0, y1, x1
    out_arr = np.zeros((h, w, d), dtype=np.asarray(g).dtype)
    cdef real[:, :, ::1] df = out_arr
    cdef double fy, fx, w00, w01, w10, w11
    for i in range(n):
        _corner(ys[i], h, &y0, &fy)
        _corner(xs[i], w, &x0, &fx)
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        x1 = x0 + 1 if x0 + 1 < w else w - 1
        w00 = (1.0 - fy) * (1.0 - fx)
        w01 = (1.0 - fy) * fx
        w10 = fy * (1.0 - fx)
        w11 = fy * fx
        for k in range(d):
            df[y0, x0, k] += <real> (w00 * g[i, k])
            df[y0, x1, k] += <real> (w01 * g[i, k])
            df[y1, x0, k] += <real> (w10 * g[i, k])
            df[y1, x1, k] += <real> (w11 * g[i, k])
    return out_arr
