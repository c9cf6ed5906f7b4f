import numpy as np
import pytest

import scdkit.tensor as T
from scdkit.errors import ShapeError
from scdkit.gradcheck import grad_check


def test_polynomial_analytic_gradient():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    T.tsum(T.mul(x, x)).backward()
    assert np.allclose(x.grad, [2.0, 4.0])
    assert grad_check(lambda t: T.tsum(T.mul(t, t)), T.tensor([1.0, 2.0])) < 1e-6


def test_eps_range_enforced():
    with pytest.raises(ShapeError):
        grad_check(lambda t: T.tsum(t), T.tensor([1.0]), eps=1e-2)


def test_nonscalar_objective_rejected():
    with pytest.raises(ShapeError):
        grad_check(lambda t: t, T.tensor([1.0, 2.0]))


def test_multi_input_check():
    rng = np.random.default_rng(3)
    a = T.Tensor(rng.normal(size=(2, 3)))
    b = T.Tensor(rng.normal(size=(3, 2)))

    def f(x, y):
        return T.tsum(T.gelu(T.matmul(x, y)))

    assert grad_check(f, [a, b]) < 1e-6
