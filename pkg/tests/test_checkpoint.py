import json
import struct

import numpy as np
import pytest

from scdkit.checkpoint import (MAGIC, load_checkpoint, load_container,
                               save_checkpoint, save_container)
from scdkit.errors import CheckpointError
from scdkit.vit import Encoder, EncoderConfig


def test_header_layout(tmp_path):
    path = tmp_path / "x.scdk"
    save_checkpoint(path, {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack("<I", raw[4:8])[0] == 1
    mlen = struct.unpack("<Q", raw[8:16])[0]
    manifest = json.loads(raw[16:16 + mlen])
    assert manifest[0]["name"] == "a.w"
    assert manifest[0]["shape"] == [2, 3]
    assert manifest[0]["dtype"] == "f32"
    assert manifest[0]["byte_offset"] == 0
    payload = raw[16 + mlen:]
    assert np.frombuffer(payload[:24], dtype="<f4").tolist() == list(range(6))


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    state = {
        "vit.block0.attn.wq.w": rng.normal(size=(8, 8)).astype(np.float32),
        "vit.pos": rng.normal(size=(65, 32)).astype(np.float32),
    }
    path = tmp_path / "enc.scdk"
    save_checkpoint(path, state, meta={"seed": 1})
    loaded, meta = load_checkpoint(path)
    assert meta == {"seed": 1}
    assert list(loaded) == list(state)
    for k in state:
        assert (loaded[k] == state[k]).all()


def test_save_is_deterministic(tmp_path):
    state = {"w": np.ones((3, 3), dtype=np.float32)}
    p1, p2 = tmp_path / "a.scdk", tmp_path / "b.scdk"
    save_checkpoint(p1, state, meta={"x": 1})
    save_checkpoint(p2, state, meta={"x": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.scdk"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_container(path)


def test_u8_entries(tmp_path):
    path = tmp_path / "mixed.scdk"
    save_container(path, [("img", np.arange(12, dtype=np.uint8).reshape(3, 4)),
                          ("w", np.ones(2, dtype=np.float32))])
    arrays, meta = load_container(path)
    assert arrays["img"].dtype == np.uint8
    assert (arrays["img"].reshape(-1) == np.arange(12)).all()
    assert meta is None


def test_encoder_state_roundtrip(tmp_path):
    enc = Encoder(EncoderConfig(), np.random.default_rng(3))
    path = tmp_path / "vit.scdk"
    save_checkpoint(path, enc.state_dict())
    twin = Encoder(EncoderConfig(), np.random.default_rng(99))
    state, _ = load_checkpoint(path)
    twin.load_state_dict(state)
    img = np.random.default_rng(5).uniform(0, 1, (3, 64, 64)).astype(np.float32)
    a = enc.forward(img).tokens.data
    b = twin.forward(img).tokens.data
    assert (a == b).all()
