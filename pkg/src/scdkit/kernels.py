"""Kernel backend selection.

The compiled Cython kernels are used when importable; setting the environment
variable ``SCDKIT_NO_EXT=1`` (or a failed build) selects the numpy fallback.
Both backends implement the same contracts; per-run determinism holds within
a backend, not across backends.
"""

import os

import numpy as np

from . import _kernels_np

if os.environ.get("SCDKIT_NO_EXT", "0") == "1":
    _impl = _kernels_np
    BACKEND = "numpy"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_np
        BACKEND = "numpy"


def _c2(x):
    return np.ascontiguousarray(x)


def softmax_fwd(x2d):
    return _impl.softmax_fwd(_c2(x2d))


def softmax_bwd(y2d, g2d):
    return _impl.softmax_bwd(_c2(y2d), _c2(g2d))


def log_softmax_fwd(x2d):
    return _impl.log_softmax_fwd(_c2(x2d))


def log_softmax_bwd(y2d, g2d):
    return _impl.log_softmax_bwd(_c2(y2d), _c2(g2d))


def layernorm_fwd(x2d, gamma, beta, eps):
    return _impl.layernorm_fwd(_c2(x2d), _c2(gamma), _c2(beta), float(eps))


def layernorm_bwd(x2d, gamma, mu, rstd, g2d):
    return _impl.layernorm_bwd(_c2(x2d), _c2(gamma), _c2(mu), _c2(rstd), _c2(g2d))


def gelu_fwd(x1d):
    return _impl.gelu_fwd(_c2(x1d))


def gelu_bwd(x1d, g1d):
    return _impl.gelu_bwd(_c2(x1d), _c2(g1d))


def bilinear_fwd(field, ys, xs):
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    return _impl.bilinear_fwd(_c2(field), ys, xs)


def bilinear_bwd(h, w, ys, xs, g):
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    return _impl.bilinear_bwd(int(h), int(w), ys, xs, _c2(g))
