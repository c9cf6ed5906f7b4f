import numpy as np
import pytest

import scdkit.tensor as tt
from scdkit.errors import ShapeError
from scdkit.optim import SGD
from scdkit.vit import Encoder, EncoderConfig


def small_encoder(seed=0, **kw):
    cfg = EncoderConfig(**kw)
    return Encoder(cfg, np.random.default_rng(seed))


def rand_image(rng, h=64, w=64):
    return rng.uniform(0, 1, size=(3, h, w)).astype(np.float32)


def test_shapes_and_cls():
    enc = small_encoder()
    fm = enc.forward(rand_image(np.random.default_rng(1)))
    assert fm.grid == (8, 8)
    assert fm.tokens.shape == (64, 32)
    assert fm.cls.shape == (32,)


def test_forward_deterministic():
    enc = small_encoder()
    img = rand_image(np.random.default_rng(2))
    a = enc.forward(img)
    b = enc.forward(img)
    assert (a.tokens.data == b.tokens.data).all()
    assert (a.cls.data == b.cls.data).all()


def test_split_composition_identity():
    img = rand_image(np.random.default_rng(3))
    for split_k in (1, 2, 3):
        enc = small_encoder(split_k=split_k, taps=(1, 2))
        full = enc.forward(img)
        staged = enc.forward_b(enc.forward_a(img))
        assert np.max(np.abs(full.tokens.data - staged.tokens.data)) == 0.0
        assert np.max(np.abs(full.cls.data - staged.cls.data)) == 0.0


def test_split_boundary_depth_minus_one():
    # depth 6, split 5 -> forward_a is patch embed + 1 block (no room for taps)
    enc = small_encoder(split_k=5, taps=())
    img = rand_image(np.random.default_rng(4))
    with pytest.raises(ShapeError):
        EncoderConfig(split_k=6)
    full = enc.forward(img)
    staged = enc.forward_b(enc.forward_a(img))
    assert np.max(np.abs(full.tokens.data - staged.tokens.data)) == 0.0


def test_taps_independent_of_split():
    img = rand_image(np.random.default_rng(5))
    ref = None
    for split_k in (1, 2, 3):
        enc = small_encoder(seed=9, split_k=split_k, taps=(2, 3))
        _, taps = enc.forward(img, want_taps=True)
        stacked = np.stack([taps[2].data, taps[3].data])
        if ref is None:
            ref = stacked
        else:
            assert np.allclose(ref, stacked, atol=0)


def test_tap_constraint_validated():
    with pytest.raises(ShapeError):
        EncoderConfig(taps=(2, 5), split_k=2)  # l2 > depth - split_k


def test_image_size_mismatch_errors():
    enc = small_encoder()
    with pytest.raises(ShapeError):
        enc.forward(np.zeros((3, 32, 32), dtype=np.float32))


def test_wide_image_pos_tiling():
    enc = small_encoder()
    img = rand_image(np.random.default_rng(6), w=128)
    fm = enc.forward(img)
    assert fm.grid == (8, 16)
    assert fm.tokens.shape == (128, 32)
    with pytest.raises(ShapeError):
        enc.forward(rand_image(np.random.default_rng(6), h=128, w=64))


def test_clone_late_blocks_identity_and_isolation():
    enc = small_encoder()
    img = rand_image(np.random.default_rng(7))
    stack = enc.clone_late_blocks()

    a = enc.encode_a(img)
    out_b = enc.encode_b(a)
    out_clone, _ = stack(a.x)
    assert np.max(np.abs(out_clone.data[:, 1:, :] - out_b.tokens.data)) == 0.0

    # mutating the clone leaves the original bit-identical
    before = enc.state_dict()
    for _, p in stack.named_params("r"):
        p.data += 1.0
    after = enc.state_dict()
    for k in before:
        assert (before[k] == after[k]).all()


def test_clone_diverges_after_one_step():
    enc = small_encoder()
    img = rand_image(np.random.default_rng(8))
    stack = enc.clone_late_blocks()
    a = enc.encode_a(img)
    out, _ = stack(a.x)
    loss = tt.tsum(tt.mul(out, out))
    loss.backward()
    opt = SGD([p for _, p in stack.named_params("r")], lr=1e-2, momentum=0.0)
    opt.step()
    out2, _ = stack(enc.encode_a(img).x)
    assert np.max(np.abs(out2.data - out.data)) > 0.0


def test_frozen_encoder_accumulates_no_grads():
    enc = small_encoder().freeze()
    img = rand_image(np.random.default_rng(9))
    fm = enc.forward(img)
    assert not fm.tokens.requires_grad
    for _, p in enc.named_params():
        assert p.grad is None
