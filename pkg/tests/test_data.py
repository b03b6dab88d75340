import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from emuformer.config import AugmentConfig
from emuformer.data import (DatasetError, DatasetSample, augment, collate, hflip, load_dataset,
                            make_synthetic_dataset, sample_rng, write_dataset)


def _write_triple(root, stem, depth_value=5000, size=(4, 4)):
    for sub in ("images", "labels", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.zeros(size + (3,), np.uint8)).save(root / "images" / f"{stem}.png")
    Image.fromarray(np.ones(size, np.uint8)).save(root / "labels" / f"{stem}.png")
    Image.fromarray(np.full(size, depth_value, np.uint16)).save(root / "depth" / f"{stem}.png")


def test_load_three_triples(tmp_path):
    for stem in ("c", "a", "b"):
        _write_triple(tmp_path, stem)
    ds = load_dataset(tmp_path, depth_scale=1000)
    assert len(ds) == 3 and ds.stems == ["a", "b", "c"]
    s = ds[0]
    assert s.depth[0, 0] == 5.0 and s.seg_labels.dtype == np.int64 and s.image.shape == (4, 4, 3)
    assert len(ds[0:2]) == 2


def test_npy_depth(tmp_path):
    _write_triple(tmp_path, "x")
    (tmp_path / "depth" / "x.png").unlink()
    np.save(tmp_path / "depth" / "x.npy", np.full((4, 4), 2.5, np.float32))
    assert load_dataset(tmp_path)[0].depth[0, 0] == 2.5


def test_missing_label_names_stem(tmp_path):
    _write_triple(tmp_path, "keep")
    _write_triple(tmp_path, "lonely")
    (tmp_path / "labels" / "lonely.png").unlink()
    with pytest.raises(DatasetError, match="lonely"):
        load_dataset(tmp_path)


def test_unreadable_file_names_stem(tmp_path):
    _write_triple(tmp_path, "broken")
    (tmp_path / "images" / "broken.png").write_bytes(b"not a png")
    ds = load_dataset(tmp_path)
    with pytest.raises(DatasetError, match="broken"):
        ds[0]


def test_missing_directory(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_misaligned_sample_rejected():
    with pytest.raises(DatasetError):
        DatasetSample(np.zeros((4, 4, 3), np.float32), np.zeros((4, 5), np.int64), np.zeros((4, 4), np.float32))


def test_synthetic_dataset_contract():
    a, b = make_synthetic_dataset(6, seed=3), make_synthetic_dataset(6, seed=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.seg_labels, y.seg_labels)
        assert np.array_equal(x.depth, y.depth)
    assert not np.array_equal(a[0].image, make_synthetic_dataset(1, seed=4)[0].image)
    for s in make_synthetic_dataset(40, seed=0, num_classes=5):
        lab = s.seg_labels
        valid = lab != 255
        assert ((lab[valid] >= 0) & (lab[valid] < 5)).all()
        assert (s.depth[valid] > 0).all()
        assert s.image.min() >= 0 and s.image.max() <= 1
    with pytest.raises(ValueError):
        make_synthetic_dataset(0)


def test_write_then_load_round_trip(tmp_path):
    samples = make_synthetic_dataset(3, seed=0)
    ds = load_dataset(write_dataset(samples, tmp_path, depth_scale=1000), depth_scale=1000)
    for s, t in zip(samples, ds):
        assert np.array_equal(s.seg_labels, t.seg_labels)
        assert np.abs(s.depth - t.depth).max() <= 0.0005 + 1e-6
        assert np.abs(s.image - t.image).max() <= 0.5 / 255 + 1e-6


def _identity_cfg(h, w):
    return AugmentConfig(scale_min=1.0, scale_max=1.0, crop_h=h, crop_w=w, hflip_prob=0.0)


def test_augment_identity():
    s = make_synthetic_dataset(1, seed=0)[0]
    out = augment(s, _identity_cfg(32, 32), np.random.default_rng(0))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.seg_labels, s.seg_labels)
    assert np.array_equal(out.depth, s.depth)


def test_flip_involution():
    s = make_synthetic_dataset(1, seed=1)[0]
    twice = hflip(hflip(s))
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.depth, s.depth)
    cfg = AugmentConfig(scale_min=1.0, scale_max=1.0, crop_h=32, crop_w=32, hflip_prob=1.0)
    once = augment(s, cfg, np.random.default_rng(0))
    assert np.array_equal(augment(once, cfg, np.random.default_rng(0)).seg_labels, s.seg_labels)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_labels_never_interpolated(seed):
    s = make_synthetic_dataset(1, seed=seed)[0]
    out = augment(s, AugmentConfig(), np.random.default_rng(seed))
    original = set(np.unique(s.seg_labels)) | {255}
    assert set(np.unique(out.seg_labels)) <= original
    assert out.image.shape == (32, 32, 3)


def _coordinate_sample(h=24, w=28):
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float32)
    image = np.stack([rows / h, cols / w, np.zeros_like(rows)], -1)
    labels = (rows * w + cols).astype(np.int64)
    depth = 1.0 + cols
    return DatasetSample(image, labels, depth)


def grid_alignment_error(seed: int, h=24, w=28) -> float:
    """Max disagreement (in source pixels) between the column coordinate read from image, labels and depth."""
    s = _coordinate_sample(h, w)
    cfg = AugmentConfig(scale_min=0.75, scale_max=1.6, crop_h=16, crop_w=16, hflip_prob=0.5, rescale_depth=False)
    out, params = augment(s, cfg, np.random.default_rng(seed), return_params=True)
    valid = out.seg_labels != 255
    img_col = out.image[..., 1] * w
    img_row = out.image[..., 0] * h
    lab_row, lab_col = np.divmod(out.seg_labels, w)
    dep_col = out.depth - 1.0
    # keep away from the clamped border where bilinear cannot extrapolate
    inner = valid & (img_col > 0.5) & (img_col < w - 1.5) & (img_row > 0.5) & (img_row < h - 1.5)
    if not inner.any():
        return 0.0
    err_lab = max(np.abs(img_col - lab_col)[inner].max(), np.abs(img_row - lab_row)[inner].max())
    err_dep = np.abs(img_col - dep_col)[inner].max()
    # nearest sampling is at most half a source pixel away from the bilinear sample point
    return max(err_lab - 0.5, err_dep)


def test_identical_geometric_transform_on_all_maps():
    for seed in range(40):
        assert grid_alignment_error(seed) <= 1e-4


def test_pad_when_scaled_below_crop():
    s = make_synthetic_dataset(1, seed=2)[0]
    cfg = AugmentConfig(scale_min=0.5, scale_max=0.5, crop_h=32, crop_w=32, hflip_prob=0.0)
    out = augment(s, cfg, np.random.default_rng(0))
    assert out.image.shape == (32, 32, 3)
    assert (out.seg_labels[16:] == 255).all() and (out.depth[:, 16:] == 0).all()


def test_depth_divided_by_scale():
    s = DatasetSample(np.zeros((16, 16, 3), np.float32), np.zeros((16, 16), np.int64), np.full((16, 16), 4.0, np.float32))
    cfg = AugmentConfig(scale_min=2.0, scale_max=2.0, crop_h=16, crop_w=16, hflip_prob=0.0)
    assert np.allclose(augment(s, cfg, np.random.default_rng(0)).depth, 2.0)
    cfg_off = AugmentConfig(scale_min=2.0, scale_max=2.0, crop_h=16, crop_w=16, hflip_prob=0.0, rescale_depth=False)
    assert np.allclose(augment(s, cfg_off, np.random.default_rng(0)).depth, 4.0)


def test_invalid_depth_does_not_bleed():
    depth = np.full((8, 8), 3.0, np.float32)
    depth[:, :4] = 0.0
    s = DatasetSample(np.zeros((8, 8, 3), np.float32), np.zeros((8, 8), np.int64), depth)
    cfg = AugmentConfig(scale_min=2.0, scale_max=2.0, crop_h=16, crop_w=16, hflip_prob=0.0, rescale_depth=False)
    out = augment(s, cfg, np.random.default_rng(0)).depth
    assert set(np.unique(out)) <= {0.0, 3.0}


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(scale_min=2.0, scale_max=1.0)
    with pytest.raises(ValueError):
        AugmentConfig(crop_h=30)


def test_sample_rng_streams_independent_of_order():
    a = [sample_rng(0, 1, i, 2).random() for i in range(5)]
    b = [sample_rng(0, 1, i, 2).random() for i in reversed(range(5))][::-1]
    assert a == b and len(set(a)) == 5


def test_collate():
    samples = make_synthetic_dataset(3, seed=0)
    b = collate(samples, [7, 8, 9])
    assert b.images.shape == (3, 3, 32, 32) and b.labels.shape == (3, 32, 32) and b.indices == [7, 8, 9]
