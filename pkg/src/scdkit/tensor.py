"""Dense tensors with reverse-mode gradient accumulation.

A ``Tensor`` wraps a contiguous numpy array (float32 by default, float64 in
verification mode) and, when produced by a primitive with a grad-requiring
input, remembers its parents plus a vector-Jacobian closure. ``backward()``
walks the graph once in reverse topological order and adds into ``.grad``
buffers; callers zero grads explicitly between steps.

Broadcasting is limited to python scalars: elementwise primitives demand
identical shapes, so silent shape bugs fail loudly.
"""

import contextlib

import numpy as np

from . import kernels
from .errors import NumericsError, ShapeError

_STATE = {"dtype": np.float32, "grad": True, "verify": False}


def default_dtype():
    return _STATE["dtype"]


@contextlib.contextmanager
def float64_mode():
    """64-bit storage plus per-primitive finite checks; for gradient
    verification only — training runs in float32."""
    saved = (_STATE["dtype"], _STATE["verify"])
    _STATE["dtype"], _STATE["verify"] = np.float64, True
    try:
        yield
    finally:
        _STATE["dtype"], _STATE["verify"] = saved


@contextlib.contextmanager
def no_grad():
    saved = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = saved


def grad_enabled():
    return _STATE["grad"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed=None):
        if seed is None:
            if self.size != 1:
                raise ShapeError("backward", f"seed required for non-scalar output {self.shape}")
            seed = np.ones_like(self.data)
        if not self.requires_grad:
            raise ShapeError("backward", "output does not require grad")
        self._accum(np.asarray(seed, dtype=self.data.dtype))
        for node in _toposort(self):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=_STATE["dtype"]), requires_grad)


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _make(op, data, parents, vjp):
    if _STATE["verify"] and not np.all(np.isfinite(data)):
        raise NumericsError(f"{op}: non-finite output")
    out = Tensor(data)
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _as_operands(op, a, b):
    """Coerce a tensor/scalar pair. Returns (a, b, scalar_side) where
    scalar_side marks which operand, if any, is a raw python scalar."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(op, f"shape mismatch {a.shape} vs {b.shape}")
        return a, b, None
    if isinstance(a, Tensor):
        if not np.isscalar(b):
            raise ShapeError(op, f"second operand must be Tensor or scalar, got {type(b)}")
        return a, float(b), "b"
    if isinstance(b, Tensor):
        if not np.isscalar(a):
            raise ShapeError(op, f"first operand must be Tensor or scalar, got {type(a)}")
        return float(a), b, "a"
    raise ShapeError(op, "no Tensor operand")


# -- elementwise primitives -------------------------------------------------


def add(a, b):
    a, b, sc = _as_operands("add", a, b)
    if sc == "b":
        data = a.data + b

        def vjp(g):
            a._accum(g)

        return _make("add", data, (a,), vjp)
    if sc == "a":
        data = a + b.data

        def vjp(g):
            b._accum(g)

        return _make("add", data, (b,), vjp)
    data = a.data + b.data

    def vjp(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _make("add", data, (a, b), vjp)


def sub(a, b):
    a, b, sc = _as_operands("sub", a, b)
    if sc == "b":
        data = a.data - b

        def vjp(g):
            a._accum(g)

        return _make("sub", data, (a,), vjp)
    if sc == "a":
        data = a - b.data

        def vjp(g):
            b._accum(-g)

        return _make("sub", data, (b,), vjp)
    data = a.data - b.data

    def vjp(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return _make("sub", data, (a, b), vjp)


def mul(a, b):
    a, b, sc = _as_operands("mul", a, b)
    if sc == "b":
        data = a.data * b

        def vjp(g):
            a._accum(g * b)

        return _make("mul", data, (a,), vjp)
    if sc == "a":
        data = a * b.data

        def vjp(g):
            b._accum(g * a)

        return _make("mul", data, (b,), vjp)
    data = a.data * b.data

    def vjp(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _make("mul", data, (a, b), vjp)


def div(a, b):
    a, b, sc = _as_operands("div", a, b)
    if sc == "b":
        inv = 1.0 / b
        data = a.data * inv

        def vjp(g):
            a._accum(g * inv)

        return _make("div", data, (a,), vjp)
    if sc == "a":
        data = a / b.data

        def vjp(g):
            b._accum(-g * data / b.data)

        return _make("div", data, (b,), vjp)
    data = a.data / b.data

    def vjp(g):
        if a.requires_grad:
            a._accum(g / b.data)
        if b.requires_grad:
            b._accum(-g * a.data / (b.data * b.data))

    return _make("div", data, (a, b), vjp)


def add_bias(x, b):
    """x (..., D) + b (D,): the one sanctioned broadcast, named explicitly."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError("add_bias", f"bias {b.shape} does not match {x.shape}")
    data = x.data + b.data

    def vjp(g):
        if x.requires_grad:
            x._accum(g)
        if b.requires_grad:
            b._accum(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make("add_bias", data, (x, b), vjp)


def exp(t):
    data = np.exp(t.data)

    def vjp(g):
        t._accum(g * data)

    return _make("exp", data, (t,), vjp)


def log(t):
    data = np.log(t.data)

    def vjp(g):
        t._accum(g / t.data)

    return _make("log", data, (t,), vjp)


def power(t, p):
    p = float(p)
    data = t.data**p

    def vjp(g):
        t._accum(g * p * t.data ** (p - 1.0))

    return _make("power", data, (t,), vjp)


# -- structural primitives ---------------------------------------------------


def matmul(a, b):
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        raise ShapeError("matmul", "both operands must be Tensors")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be >=2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner extents differ: {a.shape} @ {b.shape}")
    nd_2d = a.ndim > 2 and b.ndim == 2
    if not nd_2d and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", f"batch extents differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if nd_2d:
                k = a.shape[-1]
                n = g.shape[-1]
                b._accum(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b._accum(np.swapaxes(a.data, -1, -2) @ g)

    return _make("matmul", data, (a, b), vjp)


def transpose(t, axes=None):
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    data = np.transpose(t.data, axes)

    def vjp(g):
        t._accum(np.transpose(g, inv))

    return _make("transpose", data, (t,), vjp)


def reshape(t, shape):
    orig = t.shape
    data = t.data.reshape(shape)

    def vjp(g):
        t._accum(g.reshape(orig))

    return _make("reshape", data, (t,), vjp)


def concat(ts, axis=0):
    ts = list(ts)
    if not ts:
        raise ShapeError("concat", "empty input list")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make("concat", data, tuple(ts), vjp)


def take(t, idx):
    """Numpy-style indexing (slices, ints, integer arrays); gradients
    scatter-add back, so repeated indices accumulate."""
    data = t.data[idx]
    shape = t.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def vjp(g):
        buf = np.zeros(shape, dtype=g.dtype)
        if advanced:
            np.add.at(buf, idx, g)
        else:
            buf[idx] += g
        t._accum(buf)

    return _make("take", data, (t,), vjp)


def tsum(t, axis=None, keepdims=False):
    data = np.sum(t.data, axis=axis, keepdims=keepdims)
    shape = t.shape

    def vjp(g):
        t._accum(_unreduce(g, shape, axis, keepdims))

    return _make("sum", data, (t,), vjp)


def tmean(t, axis=None, keepdims=False):
    data = np.mean(t.data, axis=axis, keepdims=keepdims)
    shape = t.shape
    count = t.size if axis is None else np.prod([shape[a] for a in _norm_axes(axis, len(shape))])

    def vjp(g):
        t._accum(_unreduce(g, shape, axis, keepdims) / count)

    return _make("mean", data, (t,), vjp)


def _norm_axes(axis, ndim):
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _unreduce(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, _norm_axes(axis, len(shape)))
    return np.broadcast_to(g, shape)


# -- fused primitives (kernel-backed) ----------------------------------------


def _rows(t):
    return t.data.reshape(-1, t.shape[-1])


def softmax(t):
    """Row softmax over the last axis, max-subtracted for stability."""
    y2 = kernels.softmax_fwd(_rows(t))
    data = y2.reshape(t.shape)

    def vjp(g):
        t._accum(kernels.softmax_bwd(y2, g.reshape(y2.shape)).reshape(t.shape))

    return _make("softmax", data, (t,), vjp)


def log_softmax(t):
    y2 = kernels.log_softmax_fwd(_rows(t))
    data = y2.reshape(t.shape)

    def vjp(g):
        t._accum(kernels.log_softmax_bwd(y2, g.reshape(y2.shape)).reshape(t.shape))

    return _make("log_softmax", data, (t,), vjp)


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", f"gamma/beta must be ({d},), got {gamma.shape}/{beta.shape}")
    x2 = _rows(x)
    y2, mu, rstd = kernels.layernorm_fwd(x2, gamma.data, beta.data, eps)
    data = y2.reshape(x.shape)

    def vjp(g):
        dx, dgamma, dbeta = kernels.layernorm_bwd(x2, gamma.data, mu, rstd, g.reshape(y2.shape))
        if x.requires_grad:
            x._accum(dx.reshape(x.shape))
        if gamma.requires_grad:
            gamma._accum(dgamma)
        if beta.requires_grad:
            beta._accum(dbeta)

    return _make("layer_norm", data, (x, gamma, beta), vjp)


def gelu(t):
    flat = t.data.reshape(-1)
    data = kernels.gelu_fwd(flat).reshape(t.shape)

    def vjp(g):
        t._accum(kernels.gelu_bwd(flat, g.reshape(-1)).reshape(t.shape))

    return _make("gelu", data, (t,), vjp)


def bilinear_sample(field, ys, xs):
    """Sample a (H, W, D) field at continuous sites; integer coordinates hit
    grid cells exactly, out-of-range coordinates clamp to the border."""
    if field.ndim != 3:
        raise ShapeError("bilinear_sample", f"field must be (H, W, D), got {field.shape}")
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    if ys.shape != xs.shape:
        raise ShapeError("bilinear_sample", f"coordinate counts differ: {ys.shape} vs {xs.shape}")
    h, w, _ = field.shape
    data = kernels.bilinear_fwd(field.data, ys, xs)

    def vjp(g):
        field._accum(kernels.bilinear_bwd(h, w, ys, xs, g))

    return _make("bilinear_sample", data, (field,), vjp)


def l2_normalize(t, min_norm=1e-8):
    """Unit-normalize over the last axis; near-zero rows are an error."""
    n = np.sqrt(np.sum(t.data * t.data, axis=-1, keepdims=True))
    if np.min(n) < min_norm:
        raise NumericsError(f"l2_normalize: norm below {min_norm}")
    data = t.data / n

    def vjp(g):
        dot = np.sum(g * data, axis=-1, keepdims=True)
        t._accum((g - data * dot) / n)

    return _make("l2_normalize", data, (t,), vjp)


def cosine_similarity(a, b):
    """Cosine over the last axis of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", f"shape mismatch {a.shape} vs {b.shape}")
    return tsum(mul(l2_normalize(a), l2_normalize(b)), axis=-1)


def stack(ts, axis=0):
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)
