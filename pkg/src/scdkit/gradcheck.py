"""Central-difference verification of the reverse-mode gradients.

Runs in float64 mode; the analytic gradient of a scalar-valued composite is
compared coordinate-by-coordinate against (f(x+e) - f(x-e)) / 2e.
"""

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, float64_mode


def grad_check(f, points, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the given Tensor (or sequence of Tensors) to a scalar Tensor
    composed of registered primitives; ``points`` supplies the evaluation
    point. Error per coordinate is |analytic - cd| / max(|analytic|, |cd|,
    1e-8).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ShapeError("grad_check", f"eps {eps} outside [1e-6, 1e-3]")
    single = isinstance(points, Tensor)
    pts = [points] if single else list(points)
    with float64_mode():
        xs = [Tensor(np.asarray(p.data, dtype=np.float64).copy(), requires_grad=True) for p in pts]
        out = f(xs[0]) if single else f(*xs)
        if out.size != 1:
            raise ShapeError("grad_check", f"f must be scalar-valued, got {out.shape}")
        out.backward()
        worst = 0.0
        for x in xs:
            analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
            flat = x.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = (f(xs[0]) if single else f(*xs)).item()
                flat[i] = orig - eps
                fm = (f(xs[0]) if single else f(*xs)).item()
                flat[i] = orig
                cd = (fp - fm) / (2.0 * eps)
                an = analytic.reshape(-1)[i]
                err = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
                worst = max(worst, err)
    return worst
