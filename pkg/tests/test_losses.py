import numpy as np
import pytest
from scipy.stats import ortho_group

import scdkit.tensor as tt
from scdkit.errors import ShapeError
from scdkit.gradcheck import grad_check
from scdkit.losses import (CorrelationMatrix, attention_loss, correlation,
                           frobenius_loss, inter_instance_loss, normalize,
                           refiner_loss, rla_loss, sc_rla_loss, scd_loss,
                           soft_cross_entropy)


def naive_correlation(z):
    l, d = z.shape
    c = np.zeros((l, l))
    for i in range(l):
        for j in range(l):
            for k in range(d):
                c[i, j] += z[i, k] * z[j, k]
    return c


def naive_scd(zs, zt, tau_s, tau_t):
    def rows(z, tau):
        c = naive_correlation(z) / tau
        e = np.exp(c - c.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    ps = rows(zs, tau_s)
    pt = rows(zt, tau_t)
    total = 0.0
    for j in range(len(ps)):
        for k in range(len(ps)):
            total -= pt[j, k] * np.log(ps[j, k])
    return total / len(ps)


def naive_refiner_infonce(zr, zl, temp):
    zr = zr / np.linalg.norm(zr, axis=1, keepdims=True)
    zl = zl / np.linalg.norm(zl, axis=1, keepdims=True)
    l = len(zr)
    total = 0.0
    for j in range(l):
        logits = np.array([zr[j] @ zl[k] for k in range(l)]) / temp
        total -= logits[j] - np.log(np.exp(logits).sum())
    return total / l


def test_correlation_orthonormal_identity():
    z = tt.tensor(np.eye(3, 4))
    c = correlation(z)
    assert not c.normalized
    assert np.allclose(c.values.data, np.eye(3), atol=1e-6)


def test_correlation_equal_rows_constant():
    v = np.array([1.0, 2.0])
    z = tt.tensor(np.stack([v, v, v]))
    c = correlation(z)
    assert np.allclose(c.values.data, v @ v, atol=1e-6)


def test_correlation_matches_naive_loop():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(3, 2))
    c = correlation(tt.tensor(z))
    assert np.allclose(c.values.data, naive_correlation(z), atol=1e-6)
    assert np.allclose(c.values.data, c.values.data.T, atol=1e-5)


def test_normalize_uniform_and_analytic():
    z = CorrelationMatrix(values=tt.tensor(np.zeros((3, 3))))
    n = normalize(z, 1.0)
    assert n.normalized and n.temperature == 1.0
    assert np.allclose(n.values.data, 1 / 3, atol=1e-7)
    assert np.allclose(n.values.data.sum(axis=1), 1.0, atol=1e-6)

    row = CorrelationMatrix(values=tt.tensor(np.array([[1.0, 0.0]])))
    assert np.allclose(normalize(row, 1.0).values.data, [[0.7311, 0.2689]], atol=1e-4)


def test_normalize_sharp_temperature_one_hot():
    rng = np.random.default_rng(1)
    c = rng.normal(size=(5, 5))
    n = normalize(CorrelationMatrix(values=tt.tensor(c)), 1e-3)
    for j in range(5):
        onehot = np.zeros(5)
        onehot[np.argmax(c[j])] = 1.0
        assert np.abs(n.values.data[j] - onehot).max() < 1e-3


def test_scd_uniform_case_is_log_l():
    z = tt.tensor(np.zeros((4, 3)))
    loss = scd_loss(z, z.detach(), 0.2, 0.2)
    assert abs(loss.item() - np.log(4)) < 1e-6


def test_soft_ce_analytic_anchor():
    target = tt.tensor(np.array([[1.0, 0.0]]))
    log_pred = tt.log_softmax(tt.tensor(np.array([[0.0, 0.0]])))
    assert abs(soft_cross_entropy(target, log_pred).item() - 0.6931) < 1e-4


def test_scd_matches_naive_loop():
    rng = np.random.default_rng(2)
    zs = rng.normal(size=(4, 3))
    zt = rng.normal(size=(4, 3))
    got = scd_loss(tt.tensor(zs), tt.tensor(zt), 0.3, 0.5).item()
    assert abs(got - naive_scd(zs, zt, 0.3, 0.5)) < 1e-6


def test_scd_gibbs_inequality_and_equality():
    rng = np.random.default_rng(3)
    for _ in range(10):
        zs = rng.normal(size=(5, 4))
        zt = rng.normal(size=(5, 4))
        loss = scd_loss(tt.tensor(zs), tt.tensor(zt), 0.2, 0.2).item()
        pt = tt.softmax(tt.mul(correlation(tt.tensor(zt)).values, 1 / 0.2)).data
        entropy = -(pt * np.log(pt)).sum(axis=1).mean()
        assert loss - entropy >= -1e-6
        same = scd_loss(tt.tensor(zt), tt.tensor(zt), 0.2, 0.2).item()
        assert abs(same - entropy) < 1e-6


def test_scd_orthogonal_rotation_invariance():
    rng = np.random.default_rng(4)
    for seed in range(100):
        zs = rng.normal(size=(4, 3))
        zt = rng.normal(size=(4, 3))
        r = ortho_group.rvs(3, random_state=seed)
        a = scd_loss(tt.tensor(zs), tt.tensor(zt), 0.2, 0.2).item()
        b = scd_loss(tt.tensor(zs @ r), tt.tensor(zt @ r), 0.2, 0.2).item()
        assert abs(a - b) < 1e-5


def test_scd_l_mismatch_errors():
    with pytest.raises(ShapeError):
        scd_loss(tt.tensor(np.zeros((4, 3))), tt.tensor(np.zeros((5, 3))))
    with pytest.raises(ShapeError):
        scd_loss(tt.tensor(np.zeros((4, 3))), tt.Tensor(np.zeros((4, 3)), requires_grad=True))


def test_rla_cosine_anchors():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(3, 8))
    assert abs(rla_loss(tt.tensor(v), tt.tensor(v), "cosine").item()) < 1e-6
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert abs(rla_loss(tt.tensor(a), tt.tensor(b), "cosine").item() - 1.0) < 1e-6


def test_rla_infonce_analytic():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss = rla_loss(tt.tensor(a), tt.tensor(a), "infonce", temp=1.0)
    assert abs(loss.item() - 0.3133) < 1e-3
    with pytest.raises(ShapeError):
        rla_loss(tt.tensor(a[:1]), tt.tensor(a[:1]), "infonce")


def test_refiner_loss_single_token_zero():
    z = tt.tensor(np.array([[1.0, 2.0]]))
    assert abs(refiner_loss(z, z.detach(), "infonce").item()) < 1e-7


def test_refiner_infonce_orthonormal_anchor():
    z = tt.tensor(np.eye(4))
    loss = refiner_loss(z, z.detach(), "infonce", temp=1.0)
    expect = -np.log(np.e / (np.e + 3))
    assert abs(loss.item() - expect) < 1e-3
    assert abs(loss.item() - 0.7437) < 1e-3


def test_refiner_matches_naive_loop():
    rng = np.random.default_rng(6)
    zr = rng.normal(size=(5, 3))
    zl = rng.normal(size=(5, 3))
    got = refiner_loss(tt.tensor(zr), tt.tensor(zl), "infonce", temp=0.1).item()
    assert abs(got - naive_refiner_infonce(zr, zl, 0.1)) < 1e-6
    cos = refiner_loss(tt.tensor(zr), tt.tensor(zl), "cosine").item()
    naive_cos = np.mean([1 - zr[j] @ zl[j] / np.linalg.norm(zr[j]) / np.linalg.norm(zl[j])
                         for j in range(5)])
    assert abs(cos - naive_cos) < 1e-6


def test_sc_rla_composition():
    rla = tt.tensor(0.5)
    scd = tt.tensor(1.0)
    assert abs(sc_rla_loss(rla, scd, 0.2).item() - 0.7) < 1e-7
    assert abs(sc_rla_loss(rla, scd, 0.0).item() - 0.5) < 1e-7


def test_sc_rla_gradient_decomposes():
    rng = np.random.default_rng(7)
    zs_data = rng.normal(size=(4, 3))
    zt = tt.tensor(rng.normal(size=(4, 3)))
    sup = tt.tensor(rng.normal(size=(4, 3)))

    def grads(lam):
        zs = tt.Tensor(zs_data.copy(), requires_grad=True)
        pooled = tt.tmean(zs, axis=0, keepdims=True)
        l_rla = rla_loss(tt.concat([pooled, pooled], axis=0),
                         tt.concat([sup[:1], sup[:1]], axis=0), "cosine")
        l_scd = scd_loss(zs, zt)
        sc_rla_loss(l_rla, l_scd, lam).backward()
        return zs.grad.copy()

    g_total = grads(0.2)
    g_rla = grads(0.0)

    zs = tt.Tensor(zs_data.copy(), requires_grad=True)
    scd_loss(zs, zt).backward()
    g_scd = zs.grad
    assert np.abs(g_total - (g_rla + 0.2 * g_scd)).max() < 1e-6


def test_frobenius_anchors_and_naive():
    c = tt.tensor(np.ones((2, 2)))
    assert abs(frobenius_loss(c, c.detach()).item()) < 1e-7
    z = tt.tensor(np.zeros((2, 2)))
    assert abs(frobenius_loss(c, z.detach()).item() - 1.0) < 1e-6
    rng = np.random.default_rng(8)
    a = rng.normal(size=(3, 3))
    b = rng.normal(size=(3, 3))
    naive = ((a - b) ** 2).sum() / 9
    assert abs(frobenius_loss(tt.tensor(a), tt.tensor(b)).item() - naive) < 1e-6


def test_inter_instance_is_scd_over_batch():
    rng = np.random.default_rng(9)
    ps = rng.normal(size=(5, 4))
    pt = rng.normal(size=(5, 4))
    a = inter_instance_loss(tt.tensor(ps), tt.tensor(pt), 0.2, 0.2).item()
    assert abs(a - naive_scd(ps, pt, 0.2, 0.2)) < 1e-6


def test_attention_loss_identical_inputs_is_entropy_floor():
    rng = np.random.default_rng(10)
    logits = rng.normal(size=(2, 2, 4, 4))
    s = tt.tensor(logits)
    t = tt.tensor(logits)
    loss = attention_loss(s, t).item()
    p = tt.softmax(t).data
    entropy = -(p * np.log(p)).sum(-1).mean()
    assert abs(loss - entropy) < 1e-6


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    zt = rng.normal(size=(4, 3))
    sup = rng.normal(size=(4, 3))

    checks = [
        lambda z: scd_loss(z, tt.tensor(zt)),
        lambda z: rla_loss(z, tt.tensor(sup), "cosine"),
        lambda z: rla_loss(z, tt.tensor(sup), "infonce"),
        lambda z: refiner_loss(z, tt.tensor(zt), "infonce"),
        lambda z: refiner_loss(z, tt.tensor(zt), "cosine"),
        lambda z: frobenius_loss(correlation(z).values, tt.tensor(naive_correlation(zt))),
        lambda z: inter_instance_loss(z, tt.tensor(zt)),
    ]
    for f in checks:
        pt = tt.Tensor(rng.normal(size=(4, 3)))
        assert grad_check(f, pt) < 1e-4

    tl = rng.normal(size=(1, 2, 3, 3))
    assert grad_check(lambda s: attention_loss(s, tt.tensor(tl)),
                      tt.Tensor(rng.normal(size=(1, 2, 3, 3)))) < 1e-4
