"""IDX parsing, glyph domain generation, batching, and the native container format."""

import struct

import numpy as np
import pytest

from entadapt.datasets import (
    BatchPlan,
    Dataset,
    batches,
    load_dataset,
    load_idx,
    make_glyph_dataset,
    make_shifted_pair,
    save_dataset,
)


def write_idx_pair(tmp_path, images: np.ndarray, labels: np.ndarray, label_count=None):
    """Synthetic writer following the published big-endian IDX layout."""
    n, h, w = images.shape
    img_path = tmp_path / "images.idx"
    lbl_path = tmp_path / "labels.idx"
    img_path.write_bytes(
        struct.pack(">IIII", 0x00000803, n, h, w) + images.astype(np.uint8).tobytes()
    )
    m = n if label_count is None else label_count
    lbl_path.write_bytes(struct.pack(">II", 0x00000801, m) + labels.astype(np.uint8).tobytes()[:m])
    return img_path, lbl_path


class TestIdx:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(7, 5, 4), dtype=np.uint8)
        labels = rng.integers(0, 10, size=7, dtype=np.uint8)
        ds = load_idx(*write_idx_pair(tmp_path, images, labels))
        assert ds.images.shape == (7, 1, 5, 4)
        np.testing.assert_allclose(ds.images[:, 0] * 255.0, images, atol=1e-4)
        np.testing.assert_array_equal(ds.labels, labels)

    def test_bad_magic(self, tmp_path):
        img, lbl = write_idx_pair(tmp_path, np.zeros((1, 2, 2), np.uint8), np.zeros(1, np.uint8))
        raw = bytearray(img.read_bytes())
        raw[3] = 0x99
        img.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            load_idx(img, lbl)

    def test_count_mismatch(self, tmp_path):
        images = np.zeros((3, 2, 2), np.uint8)
        labels = np.zeros(3, np.uint8)
        img, lbl = write_idx_pair(tmp_path, images, labels, label_count=2)
        with pytest.raises(ValueError, match="mismatch"):
            load_idx(img, lbl)

    def test_truncated_payload(self, tmp_path):
        img, lbl = write_idx_pair(tmp_path, np.zeros((2, 3, 3), np.uint8), np.zeros(2, np.uint8))
        img.write_bytes(img.read_bytes()[:-5])
        with pytest.raises(ValueError, match="pixel bytes"):
            load_idx(img, lbl)

    def test_empty_files(self, tmp_path):
        img, lbl = write_idx_pair(
            tmp_path, np.zeros((0, 4, 4), np.uint8), np.zeros(0, np.uint8)
        )
        ds = load_idx(img, lbl)
        assert len(ds) == 0


class TestGlyphs:
    def test_exact_class_balance(self):
        ds = make_glyph_dataset(200, seed=0)
        counts = np.bincount(ds.labels, minlength=10)
        np.testing.assert_array_equal(counts, 20)

    def test_rejects_unbalanced_size(self):
        with pytest.raises(ValueError, match="multiple of 10"):
            make_glyph_dataset(55, seed=0)

    def test_same_seed_identical(self):
        a = make_glyph_dataset(50, seed=4)
        b = make_glyph_dataset(50, seed=4)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_pixel_range(self):
        ds = make_glyph_dataset(50, seed=1, shifted=True)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_shifted_pair_differs_and_is_deterministic(self):
        s1, t1 = make_shifted_pair(seed=2, size=50)
        s2, t2 = make_shifted_pair(seed=2, size=50)
        np.testing.assert_array_equal(s1.images, s2.images)
        np.testing.assert_array_equal(t1.images, t2.images)
        assert not np.array_equal(s1.images, t1.images)
        # target background is bright (inverted polarity)
        assert t1.images.mean() > s1.images.mean()


class TestBatches:
    def test_partition_exact(self):
        ds = make_glyph_dataset(50, seed=0)
        seen = np.concatenate([idx for idx, _, _ in batches(ds, BatchPlan(16, seed=1))])
        np.testing.assert_array_equal(np.sort(seen), np.arange(50))

    def test_same_seed_same_order(self):
        ds = make_glyph_dataset(50, seed=0)
        a = [idx for idx, _, _ in batches(ds, BatchPlan(16, seed=9))]
        b = [idx for idx, _, _ in batches(ds, BatchPlan(16, seed=9))]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_oversized_batch(self):
        ds = make_glyph_dataset(30, seed=0)
        out = list(batches(ds, BatchPlan(100, seed=0)))
        assert len(out) == 1 and out[0][1].shape[0] == 30

    def test_drop_last(self):
        ds = make_glyph_dataset(50, seed=0)
        out = list(batches(ds, BatchPlan(16, seed=0, drop_last=True)))
        assert [b[1].shape[0] for b in out] == [16, 16, 16]

    def test_labels_follow_indices(self):
        ds = make_glyph_dataset(50, seed=0)
        for idx, _, labels in batches(ds, BatchPlan(8, seed=3)):
            np.testing.assert_array_equal(labels, ds.labels[idx])


class TestContainerDataset:
    def test_roundtrip(self, tmp_path):
        ds = make_glyph_dataset(30, seed=5)
        path = tmp_path / "data.bin"
        save_dataset(ds, path)
        loaded = load_dataset(path)
        np.testing.assert_array_equal(loaded.images, ds.images)
        np.testing.assert_array_equal(loaded.labels, ds.labels)
        np.testing.assert_allclose(loaded.input_mean, ds.input_mean, atol=1e-6)

    def test_unlabeled_roundtrip(self, tmp_path):
        ds = Dataset(np.zeros((3, 1, 4, 4), np.float32))
        path = tmp_path / "data.bin"
        save_dataset(ds, path)
        assert load_dataset(path).labels is None


class TestDatasetValidation:
    def test_range_check(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            Dataset(np.full((1, 1, 2, 2), 2.0, np.float32))

    def test_label_length_check(self):
        with pytest.raises(ValueError, match="one entry per image"):
            Dataset(np.zeros((2, 1, 2, 2), np.float32), np.zeros(3, np.int64))
