"""IDX and CIFAR-10 binary parsing, checksums, desk-scale generators."""

import struct

import numpy as np
import pytest

from bnnkit.data import (BadMagicError, CountMismatchError, Dataset,
                         TruncatedPayloadError, dataset_checksum,
                         digits_arrays, load_cifar10, load_idx,
                         make_digits_idx, make_synthetic_cifar,
                         synthetic_color_arrays, write_cifar10, write_idx)


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (50, 9, 9), dtype=np.uint8)
    labels = rng.integers(0, 10, 50, dtype=np.uint8)
    ip, lp = tmp_path / "img", tmp_path / "lbl"
    write_idx(images, labels, ip, lp)
    return images, labels, ip, lp


class TestIdx:
    def test_header_oracle(self, idx_pair):
        images, labels, ip, lp = idx_pair
        raw = ip.read_bytes()
        magic, n, h, w = struct.unpack_from(">IIII", raw, 0)
        assert magic == 0x00000803 and (n, h, w) == (50, 9, 9)
        assert len(raw) == 16 + 50 * 81
        ds = load_idx(ip, lp)
        assert ds.images.shape == (50, 1, 9, 9)
        np.testing.assert_array_equal(ds.labels, labels)

    def test_pixel_255_maps_to_one(self, tmp_path):
        images = np.full((1, 2, 2), 255, dtype=np.uint8)
        write_idx(images, np.zeros(1, dtype=np.uint8),
                  tmp_path / "i", tmp_path / "l")
        ds = load_idx(tmp_path / "i", tmp_path / "l")
        assert ds.images.max() == 1.0

    def test_wrong_magic(self, idx_pair, tmp_path):
        _, _, ip, lp = idx_pair
        data = bytearray(ip.read_bytes())
        data[3] = 0x99
        bad = tmp_path / "bad"
        bad.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            load_idx(bad, lp)

    def test_truncated_payload(self, idx_pair, tmp_path):
        _, _, ip, lp = idx_pair
        data = ip.read_bytes()
        bad = tmp_path / "bad"
        bad.write_bytes(data[:-5])
        with pytest.raises(TruncatedPayloadError):
            load_idx(bad, lp)

    def test_label_count_mismatch(self, idx_pair, tmp_path):
        images, labels, ip, _ = idx_pair
        lp = tmp_path / "short"
        with open(lp, "wb") as f:
            f.write(struct.pack(">II", 0x00000801, 49))
            f.write(labels[:49].tobytes())
        with pytest.raises(CountMismatchError):
            load_idx(ip, lp)

    def test_checksum_stable_across_loads(self, idx_pair):
        _, _, ip, lp = idx_pair
        assert load_idx(ip, lp).checksum == load_idx(ip, lp).checksum

    def test_standard_10k_test_pair(self, tmp_path):
        rng = np.random.default_rng(3)
        images = rng.integers(0, 256, (10000, 28, 28), dtype=np.uint8)
        labels = (np.arange(10000) % 10).astype(np.uint8)
        write_idx(images, labels, tmp_path / "i", tmp_path / "l")
        ds = load_idx(tmp_path / "i", tmp_path / "l")
        assert ds.images.shape == (10000, 1, 28, 28)
        assert ds.labels.shape == (10000,)


class TestCifar10:
    def test_record_format(self, tmp_path):
        rng = np.random.default_rng(1)
        images = rng.integers(0, 256, (20, 3, 32, 32), dtype=np.uint8)
        labels = rng.integers(0, 10, 20, dtype=np.uint8)
        path = tmp_path / "batch.bin"
        write_cifar10(images, labels, path)
        assert path.stat().st_size == 20 * 3073
        ds = load_cifar10(path)
        assert ds.images.shape == (20, 3, 32, 32)
        np.testing.assert_array_equal(ds.labels, labels)
        np.testing.assert_allclose(ds.images, images / 255.0, atol=1e-7)

    def test_label_byte_nine(self, tmp_path):
        images = np.zeros((1, 3, 32, 32), dtype=np.uint8)
        path = tmp_path / "b.bin"
        write_cifar10(images, np.array([9], dtype=np.uint8), path)
        assert load_cifar10(path).labels[0] == 9

    def test_bad_file_size(self, tmp_path):
        path = tmp_path / "b.bin"
        path.write_bytes(b"\x00" * 5000)
        with pytest.raises(TruncatedPayloadError):
            load_cifar10(path)

    def test_full_batch_file(self, tmp_path):
        rng = np.random.default_rng(4)
        images = rng.integers(0, 256, (10000, 3, 32, 32), dtype=np.uint8)
        labels = rng.integers(0, 10, 10000, dtype=np.uint8)
        path = tmp_path / "data_batch_1.bin"
        write_cifar10(images, labels, path)
        ds = load_cifar10(path)
        assert ds.images.shape == (10000, 3, 32, 32)

    def test_multiple_batches_concatenate(self, tmp_path):
        rng = np.random.default_rng(2)
        paths = []
        for i in range(2):
            images = rng.integers(0, 256, (5, 3, 32, 32), dtype=np.uint8)
            labels = rng.integers(0, 10, 5, dtype=np.uint8)
            p = tmp_path / f"b{i}.bin"
            write_cifar10(images, labels, p)
            paths.append(p)
        assert load_cifar10(paths).images.shape[0] == 10


class TestDataset:
    def test_count_mismatch_rejected(self):
        with pytest.raises(CountMismatchError):
            Dataset(images=np.zeros((3, 1, 2, 2), dtype=np.float32),
                    labels=np.zeros(2, dtype=np.int64))

    def test_checksum_binds_content(self):
        imgs = np.zeros((2, 1, 2, 2), dtype=np.float32)
        labels = np.array([0, 1], dtype=np.int64)
        c1 = dataset_checksum(imgs, labels)
        imgs2 = imgs.copy()
        imgs2[0, 0, 0, 0] = 0.5
        assert dataset_checksum(imgs2, labels) != c1
        assert dataset_checksum(imgs, np.array([1, 0])) != c1

    def test_subset(self):
        ds = Dataset(images=np.zeros((10, 1, 2, 2), dtype=np.float32),
                     labels=np.arange(10, dtype=np.int64) % 3)
        sub = ds.subset(4)
        assert sub.images.shape[0] == 4
        assert sub.checksum != ds.checksum


class TestGenerators:
    def test_digits_upsampled_shape(self):
        images, labels = digits_arrays(28)
        assert images.shape[1:] == (28, 28)
        assert images.dtype == np.uint8
        assert set(np.unique(labels)) == set(range(10))

    def test_digits_idx_round_trip(self, tmp_path):
        (ti, tl), (vi, vl) = make_digits_idx(tmp_path, resolution=28)
        train = load_idx(ti, tl, split="train")
        test = load_idx(vi, vl, split="test")
        assert train.images.shape[1:] == (1, 28, 28)
        assert train.num_classes == 10
        assert len(train.labels) + len(test.labels) == 1797

    def test_synthetic_classes_are_distinguishable(self):
        images, labels = synthetic_color_arrays(200, num_classes=4, seed=0)
        assert images.shape == (200, 3, 32, 32)
        # same-class samples correlate more than cross-class ones
        flat = images.astype(np.float64).reshape(200, -1)
        flat -= flat.mean(axis=1, keepdims=True)
        same, cross = [], []
        for i in range(0, 60, 2):
            for j in range(1, 60, 2):
                c = float(flat[i] @ flat[j] /
                          (np.linalg.norm(flat[i]) * np.linalg.norm(flat[j])))
                (same if labels[i] == labels[j] else cross).append(c)
        assert np.mean(same) > np.mean(cross) + 0.1

    def test_synthetic_cifar_files_load(self, tmp_path):
        train_path, test_path = make_synthetic_cifar(
            tmp_path, n_train=30, n_test=10, seed=1)
        train = load_cifar10(train_path, split="train")
        test = load_cifar10(test_path, split="test")
        assert train.images.shape == (30, 3, 32, 32)
        assert test.images.shape == (10, 3, 32, 32)
