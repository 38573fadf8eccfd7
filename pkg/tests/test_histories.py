import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forgeloc.errors import ConfigError, DegenerateInputError
from forgeloc.histories import (N_HISTORIES, CameraImageSet, EditingHistory, apply_history,
                                enumerate_histories, history_from_id, plan_contrastive_batch,
                                positive_sets, sample_contrastive_batch)
from forgeloc.imageio import blockiness, write_image


def test_enumeration_has_512_distinct_histories():
    hs = enumerate_histories()
    assert len(hs) == N_HISTORIES == 512
    assert len(set(hs)) == 512
    texts = [h.to_text() for h in hs]
    assert len(set(texts)) == 512
    assert [EditingHistory.from_text(t) for t in texts] == hs


def test_history_zero_is_identity():
    h = history_from_id(0)
    assert h.resize_factor == 1.0 and h.jpeg_quality is None
    assert (h.contrast_gain, h.brightness_offset) == (1.0, 0.0)
    assert h.op_order == ()


@given(st.integers(0, 511))
def test_id_roundtrip(i):
    h = history_from_id(i)
    assert h.id == i
    assert 0.5 <= h.resize_factor <= 1.5
    assert h.jpeg_quality is None or 30 <= h.jpeg_quality <= 100
    assert EditingHistory.from_text(f"H{i}") == h


def test_ops_run_in_fixed_order():
    for h in enumerate_histories():
        order = ["resize", "contrast", "jpeg"]
        assert list(h.op_order) == [op for op in order if op in h.op_order]


def test_out_of_range_history_rejected():
    with pytest.raises(ValueError):
        EditingHistory(resize_factor=2.0)
    with pytest.raises(ValueError):
        EditingHistory(jpeg_quality=10)
    with pytest.raises(ValueError):
        history_from_id(512)


def test_identity_history_leaves_image_unchanged():
    img = np.random.default_rng(0).uniform(size=(40, 50, 3))
    out = apply_history(img, history_from_id(0), seed=3)
    assert np.array_equal(out, img)


def test_half_resize_shape():
    img = np.random.default_rng(1).uniform(size=(128, 128, 3))
    out = apply_history(img, EditingHistory(resize_factor=0.5), seed=0)
    assert out.shape == (64, 64, 3)


@pytest.mark.parametrize("hid", [1, 77, 200, 333, 511])
def test_output_shape_range_and_determinism(hid):
    img = np.random.default_rng(hid).uniform(size=(70, 90, 3))
    h = history_from_id(hid)
    out = apply_history(img, h, seed=5)
    assert out.shape[:2] == (round(70 * h.resize_factor), round(90 * h.resize_factor))
    assert out.min() >= 0 and out.max() <= 1
    assert np.array_equal(out, apply_history(img, h, seed=5))


def test_degenerate_resize():
    with pytest.raises(DegenerateInputError):
        apply_history(np.ones((2, 3, 3)) * 0.5, EditingHistory(resize_factor=0.5), 0)


def _test_card():
    y, x = np.mgrid[0:128, 0:128]
    base = 0.5 + 0.35 * np.sin(x * 1.3) * np.cos(y * 0.9)
    noise = np.random.default_rng(2).uniform(-0.1, 0.1, size=(128, 128, 3))
    return np.clip(base[..., None] + noise, 0, 1)


def test_low_quality_jpeg_leaves_block_grid():
    card = _test_card()
    raw = apply_history(card, EditingHistory(), 0)
    q30 = apply_history(card, EditingHistory(jpeg_quality=30), 0)
    assert np.abs(q30 - card).mean() > 0
    assert blockiness(raw) < 1.02
    assert blockiness(q30) > 1.1


def test_contrastive_batch_layout(toy_cameras):
    b = sample_contrastive_batch(toy_cameras, seed=7)
    assert len(b) == 160
    assert b.patches.shape == (160, 64, 64, 3)
    assert b.patches.min() >= 0 and b.patches.max() <= 1
    assert len(set(b.camera_id.tolist())) == 5
    assert len(set(b.history_id.tolist())) == 4
    assert set(b.position_id.tolist()) == {0, 1}
    assert len(set(b.image_id.tolist())) == 20
    assert (b.origins % 8 == 0).all()


def test_batch_is_reproducible(toy_cameras):
    a = sample_contrastive_batch(toy_cameras, seed=7)
    b = sample_contrastive_batch(toy_cameras, seed=7)
    assert np.array_equal(a.patches, b.patches)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.image_id, b.image_id)
    c = sample_contrastive_batch(toy_cameras, seed=8)
    assert not np.array_equal(a.patches, c.patches)


def _brute_positive_sets(b):
    out = []
    for i in range(len(b)):
        out.append([j for j in range(len(b)) if j != i
                    and b.camera_id[j] == b.camera_id[i] and b.position_id[j] == b.position_id[i]
                    and b.history_id[j] == b.history_id[i] and b.image_id[j] != b.image_id[i]])
    return out


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_positive_sets_nonempty_and_symmetric(toy_cameras, seed):
    b = sample_contrastive_batch(toy_cameras, seed)
    sets = positive_sets(b)
    assert [s.tolist() for s in sets] == _brute_positive_sets(b)
    for i, s in enumerate(sets):
        assert len(s) >= 1 and i not in s
        for j in s:
            assert i in sets[j]


def test_same_position_shares_coordinates(toy_cameras):
    b = sample_contrastive_batch(toy_cameras, seed=11)
    for hid in set(b.history_id.tolist()):
        for p in (0, 1):
            sel = (b.history_id == hid) & (b.position_id == p)
            assert len({tuple(o) for o in b.origins[sel]}) == 1
        o0 = b.origins[(b.history_id == hid) & (b.position_id == 0)][0]
        o1 = b.origins[(b.history_id == hid) & (b.position_id == 1)][0]
        assert tuple(o0) != tuple(o1)


def test_insufficient_cameras_named(toy_cameras):
    small = CameraImageSet([im for im in toy_cameras.images if im.camera_id < 3])
    with pytest.raises(ConfigError, match="short by 2"):
        sample_contrastive_batch(small, 0)


def test_undersized_images_rejected():
    items = [(c, c * 10 + k, np.zeros((100, 100, 3))) for c in range(5) for k in range(4)]
    with pytest.raises(ConfigError):
        sample_contrastive_batch(CameraImageSet.from_arrays(items), 0)


def test_manifest_loading(tmp_path, toy_cameras):
    lines = []
    for im in toy_cameras.images[:10]:
        p = tmp_path / f"{im.image_id}.png"
        write_image(p, im.pixels)
        lines.append(json.dumps({"camera_id": im.camera_id, "image_id": im.image_id, "path": p.name}))
    (tmp_path / "cams.jsonl").write_text("\n".join(lines) + "\n")
    ds = CameraImageSet.from_manifest(tmp_path / "cams.jsonl")
    assert len(ds) == 10
    assert ds.images[0].load().shape == (128, 128, 3)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_emitted_patches_in_range(toy_cameras, seed):
    b = sample_contrastive_batch(toy_cameras, seed)
    assert b.patches.shape[1:] == (64, 64, 3)
    assert b.patches.min() >= 0.0 and b.patches.max() <= 1.0


@pytest.mark.parametrize("seed", [0, 5])
def test_plan_matches_rendered_batch(toy_cameras, seed):
    plan, _, _ = plan_contrastive_batch(toy_cameras, seed)
    full = sample_contrastive_batch(toy_cameras, seed)
    assert plan.patches is None and len(plan) == 160
    for name in ("camera_id", "position_id", "history_id", "image_id", "origins"):
        assert np.array_equal(getattr(plan, name), getattr(full, name))
