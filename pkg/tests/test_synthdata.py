import numpy as np
import pytest

from scdkit import synthdata as sd
from scdkit.errors import DataError


def test_same_seed_bit_identical():
    a = sd.generate(7, 5)
    b = sd.generate(7, 5)
    for sa, sb in zip(a, b):
        assert (sa.image == sb.image).all()
        assert (sa.patch_labels == sb.patch_labels).all()
        assert sa.instances == sb.instances


def test_scene_invariants():
    scenes = sd.generate(3, 20)
    for s in scenes:
        assert s.image.shape == (3, 64, 64)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert abs(s.scene_histogram.sum() - 1.0) < 1e-6
        assert 2 <= len(s.instances) <= 5
        # labels re-derivable from pixels
        rederived = sd.derive_patch_labels(s.image, s.stuff_class)
        assert (rederived == s.patch_labels).all()
        # instance boxes patch aligned, in bounds, non-overlapping interiors
        covered = np.zeros((8, 8), dtype=int)
        for box, cls in s.instances:
            for v in (box.x0 * 8, box.y0 * 8, box.x1 * 8, box.y1 * 8):
                assert abs(v - round(v)) < 1e-6
            r0, r1 = round(box.y0 * 8), round(box.y1 * 8)
            c0, c1 = round(box.x0 * 8), round(box.x1 * 8)
            covered[r0:r1, c0:c1] += 1
            inside = s.patch_labels[r0:r1, c0:c1]
            assert (inside == cls).any()
            # shape pixels stay inside their boxes
            u8 = np.round(s.image * 255).astype(np.uint8)
            color = sd.CLASS_COLORS[cls]
            mask = np.all(u8 == color[:, None, None], axis=0)
            for obox, ocls in s.instances:
                if ocls == cls:
                    orr0, orr1 = round(obox.y0 * 8) * 8, round(obox.y1 * 8) * 8
                    occ0, occ1 = round(obox.x0 * 8) * 8, round(obox.x1 * 8) * 8
                    mask[orr0:orr1, occ0:occ1] = False
            assert not mask.any()
        assert covered.max() <= 1


def test_label_majority_matches_shape_class():
    scenes = sd.generate(11, 10)
    for s in scenes:
        for box, cls in s.instances:
            r0, r1 = round(box.y0 * 8), round(box.y1 * 8)
            c0, c1 = round(box.x0 * 8), round(box.x1 * 8)
            inside = s.patch_labels[r0:r1, c0:c1]
            thing = inside[inside < sd.NUM_THING]
            assert (thing == cls).all()


def test_class_frequencies_near_uniform():
    scenes = sd.generate(0, 800)
    counts = np.zeros(sd.NUM_THING)
    for s in scenes:
        for _, cls in s.instances:
            counts[cls] += 1
    expect = counts.sum() / sd.NUM_THING
    assert (np.abs(counts - expect) <= 0.2 * expect).all()
    stuff = np.bincount([s.stuff_class - sd.NUM_THING for s in scenes], minlength=4)
    assert (np.abs(stuff - 200) <= 0.2 * 200).all()


def test_prototypes_contract():
    p = sd.prototypes(5, k=16, d=32)
    assert np.allclose(np.linalg.norm(p, axis=1), 1.0, atol=1e-6)
    cos = p @ p.T - np.eye(16)
    assert np.abs(cos).max() < 0.3
    assert (p == sd.prototypes(5, k=16, d=32)).all()
    with pytest.raises(DataError):
        sd.prototypes(1, k=40, d=4)


def test_roundtrip_serialization(tmp_path):
    scenes = sd.generate(2, 6)
    path = tmp_path / "scenes.scdk"
    sd.save_scenes(path, scenes, seed=2)
    loaded, meta = sd.load_scenes(path)
    assert meta["count"] == 6 and meta["seed"] == 2
    for a, b in zip(scenes, loaded):
        assert np.allclose(a.image, b.image, atol=1e-7)
        assert (a.patch_labels == b.patch_labels).all()
        assert a.instances == b.instances
        assert a.stuff_class == b.stuff_class


def test_make_target_dims():
    t = sd.make_target(4, patches=2)
    assert t.shape == (3, 16, 16)
    assert (t == sd.make_target(4, patches=2)).all()


def test_split_deterministic():
    scenes = sd.generate(9, 30)
    split = sd.split_scenes(scenes)
    assert len(split["train"]) == 24 and len(split["val"]) == 3 and len(split["test"]) == 3
