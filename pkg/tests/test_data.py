import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stoplab import data as D
from stoplab.errors import ConfigError, FormatError, InternalError


def test_synthetic_is_deterministic_and_balanced():
    a = D.generate_synthetic(50, H=16, W=16, num_classes=4, seed=3)
    b = D.generate_synthetic(50, H=16, W=16, num_classes=4, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels, minlength=4)
    assert counts.tolist() == [13, 13, 12, 12]
    assert a.images.shape == (50, 16, 16, 1)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0


def test_synthetic_seeds_differ():
    a = D.generate_synthetic(8, seed=0)
    b = D.generate_synthetic(8, seed=1)
    assert not np.array_equal(a.images, b.images)


def test_synthetic_color_and_limits():
    batch = D.generate_synthetic(4, channels=3, num_classes=16)
    assert batch.images.shape[-1] == 3
    with pytest.raises(ConfigError):
        D.generate_synthetic(4, num_classes=17)
    with pytest.raises(ConfigError):
        D.generate_synthetic(4, H=8, W=8)
    with pytest.raises(ConfigError):
        D.generate_synthetic(4, channels=2)


def test_synthetic_classes_are_distinguishable():
    # class-mean images differ by far more than the pixel noise allows by chance
    batch = D.generate_synthetic(400, num_classes=4, seed=0)
    means = np.stack([batch.images[batch.labels == c].mean(0) for c in range(4)])
    gaps = [np.abs(means[i] - means[j]).mean() for i in range(4) for j in range(i + 1, 4)]
    assert min(gaps) > 0.01


def test_zero_images():
    batch = D.generate_synthetic(0)
    assert batch.images.shape == (0, 32, 32, 1) and len(batch.labels) == 0


def test_idx_round_trip(tmp_path):
    batch = D.generate_synthetic(10, H=16, W=16, seed=2)
    D.write_idx_images(tmp_path / "x.idx", batch.images)
    D.write_idx_labels(tmp_path / "y.idx", batch.labels)
    back = D.load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
    assert np.array_equal(back.labels, batch.labels)
    # u8 quantisation error is at most half a grey level
    assert np.max(np.abs(back.images - batch.images)) <= 0.5 / 255 + 1e-7


def test_idx_header_is_big_endian(tmp_path):
    D.write_idx_images(tmp_path / "x.idx", np.zeros((2, 3, 5)))
    raw = (tmp_path / "x.idx").read_bytes()
    assert raw[:16] == struct.pack(">IIII", 0x803, 2, 3, 5)
    assert len(raw) == 16 + 30
    D.write_idx_labels(tmp_path / "y.idx", np.array([1, 2]))
    assert (tmp_path / "y.idx").read_bytes() == bytes([0, 0, 8, 1, 0, 0, 0, 2, 1, 2])


def test_idx_empty_file_round_trip(tmp_path):
    D.write_idx_images(tmp_path / "x.idx", np.zeros((0, 4, 4)))
    assert D.load_idx(tmp_path / "x.idx").images.shape == (0, 4, 4, 1)


@pytest.mark.parametrize(
    "mutate, offset",
    [
        (lambda raw: b"\x00\x00\x08\x02" + raw[4:], "byte offset 0"),
        (lambda raw: raw[:10], "byte offset 10"),
        (lambda raw: raw[:-3], "truncated"),
        (lambda raw: raw + b"\x00", "trailing"),
    ],
)
def test_idx_corruption_reports_offsets(tmp_path, mutate, offset):
    D.write_idx_images(tmp_path / "x.idx", np.zeros((2, 4, 4)))
    raw = (tmp_path / "x.idx").read_bytes()
    (tmp_path / "bad.idx").write_bytes(mutate(raw))
    with pytest.raises(FormatError, match=offset):
        D.load_idx(tmp_path / "bad.idx")


def test_idx_label_count_mismatch(tmp_path):
    D.write_idx_images(tmp_path / "x.idx", np.zeros((3, 4, 4)))
    D.write_idx_labels(tmp_path / "y.idx", np.array([0, 1]))
    with pytest.raises(FormatError):
        D.load_idx(tmp_path / "x.idx", tmp_path / "y.idx")


def test_idx_rejects_color_and_wide_labels(tmp_path):
    with pytest.raises(ConfigError):
        D.write_idx_images(tmp_path / "x.idx", np.zeros((1, 4, 4, 3)))
    with pytest.raises(ConfigError):
        D.write_idx_labels(tmp_path / "y.idx", np.array([256]))


def test_patchify_layout_matches_loops():
    rng = np.random.default_rng(0)
    images = rng.random((2, 8, 12, 3))
    grid = D.patchify(images, 4)
    assert (grid.grid_h, grid.grid_w) == (2, 3)
    for n in range(2):
        for gy in range(2):
            for gx in range(3):
                block = images[n, gy * 4:(gy + 1) * 4, gx * 4:(gx + 1) * 4, :]
                assert np.array_equal(grid.patches[n, gy * 3 + gx], block.reshape(-1))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.sampled_from([1, 3]))
def test_patchify_round_trip(gh, gw, p, c):
    images = np.random.default_rng(gh * 10 + gw).random((2, gh * p, gw * p, c))
    assert np.array_equal(D.unpatchify(D.patchify(images, p)), images)


def test_patch_must_divide():
    with pytest.raises(ConfigError):
        D.patchify(np.zeros((1, 10, 10, 1)), 4)


def test_random_mask_counts():
    rng = np.random.default_rng(0)
    m = D.sample_random_mask(16, 0.75, rng)
    assert m.target_idx.size == 12 and m.context_idx.size == 4
    assert np.array_equal(np.union1d(m.context_idx, m.target_idx), np.arange(16))
    with pytest.raises(ConfigError):
        D.sample_random_mask(16, 1.0, rng)
    with pytest.raises(ConfigError):
        D.sample_random_mask(1, 0.5, rng)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(2, 8), st.integers(1, 4), st.integers(0, 10_000))
def test_block_mask_partitions_grid(gh, gw, nt, seed):
    m = D.sample_block_mask(gh, gw, num_targets=nt, rng=np.random.default_rng(seed))
    assert m.context_idx.size >= 1 and m.target_idx.size >= 1
    assert np.array_equal(np.union1d(m.context_idx, m.target_idx), np.arange(gh * gw))
    assert np.intersect1d(m.context_idx, m.target_idx).size == 0


def test_block_mask_targets_form_rectangles():
    m = D.sample_block_mask(8, 8, num_targets=1, rng=np.random.default_rng(5))
    rows, cols = np.divmod(m.target_idx, 8)
    assert m.target_idx.size == (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)


def test_block_mask_validation():
    with pytest.raises(ConfigError):
        D.sample_block_mask(4, 4, num_targets=0)
    with pytest.raises(ConfigError):
        D.sample_block_mask(4, 4, target_scale=(0.5, 0.2))


def test_mask_spec_invariants():
    with pytest.raises(InternalError):
        D.MaskSpec([0, 1], [1, 2], 4)
    with pytest.raises(InternalError):
        D.MaskSpec([0], [], 4)
    with pytest.raises(InternalError):
        D.MaskSpec([0], [5], 4)


def test_stack_masks_truncates_to_common_counts():
    rng = np.random.default_rng(1)
    masks = [D.sample_block_mask(4, 4, rng=rng) for _ in range(5)]
    stacked = D.stack_masks(masks)
    assert stacked.per_image
    assert stacked.context_idx.shape == (5, min(m.context_idx.size for m in masks))
    assert stacked.target_idx.shape == (5, min(m.target_idx.size for m in masks))
