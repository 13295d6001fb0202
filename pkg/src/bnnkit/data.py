"""Dataset ingestion: IDX and CIFAR-10 binary formats, plus desk-scale
dataset builders (an upsampled handwritten-digits set re-encoded as IDX,
and a synthetic colour-image generator in the CIFAR batch format).

Images load as float32 N x C x H x W scaled to [0, 1]; every dataset
carries a content checksum that binds soft-target caches to their source.
"""

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073            # 1 label byte + 3 * 32 * 32 pixels


class DataFormatError(Exception):
    """Base class for dataset file problems."""


class BadMagicError(DataFormatError):
    pass


class TruncatedPayloadError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray       # float32, (N, C, H, W), values in [0, 1]
    labels: np.ndarray       # int64, (N,)
    split: str = ""
    checksum: bytes = b""

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.shape[0] == 0:
            raise DataFormatError("dataset is empty")
        if not self.checksum:
            self.checksum = dataset_checksum(self.images, self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, n: int, rng: np.random.Generator | None = None) -> "Dataset":
        """First n samples (or a seeded random subset when rng is given)."""
        idx = np.arange(min(n, len(self.labels)))
        if rng is not None:
            idx = rng.permutation(len(self.labels))[:n]
        return Dataset(images=self.images[idx], labels=self.labels[idx],
                       split=self.split)


def dataset_checksum(images: np.ndarray, labels: np.ndarray) -> bytes:
    """32-byte digest over canonical little-endian bytes of the arrays."""
    h = hashlib.sha256()
    h.update(struct.pack("<4Q", *images.shape))
    h.update(np.ascontiguousarray(images, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    return h.digest()


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------

def load_idx(images_path, labels_path, split: str = "") -> Dataset:
    """Parse an IDX image/label file pair (big-endian headers, u8 pixels)."""
    with open(images_path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise TruncatedPayloadError(f"{images_path}: header truncated")
    magic, n, h, w = struct.unpack_from(">IIII", raw, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagicError(
            f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(raw) != 16 + n * h * w:
        raise TruncatedPayloadError(
            f"{images_path}: {len(raw) - 16} payload bytes for {n} {h}x{w} images")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 1, h, w)

    with open(labels_path, "rb") as f:
        raw_l = f.read()
    if len(raw_l) < 8:
        raise TruncatedPayloadError(f"{labels_path}: header truncated")
    magic_l, n_l = struct.unpack_from(">II", raw_l, 0)
    if magic_l != IDX_LABELS_MAGIC:
        raise BadMagicError(
            f"{labels_path}: magic 0x{magic_l:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(raw_l) != 8 + n_l:
        raise TruncatedPayloadError(
            f"{labels_path}: {len(raw_l) - 8} label bytes for declared {n_l}")
    if n_l != n:
        raise CountMismatchError(f"{n} images but {n_l} labels")
    labels = np.frombuffer(raw_l, dtype=np.uint8, offset=8).astype(np.int64)
    images = pixels.astype(np.float32) / 255.0
    return Dataset(images=images, labels=labels, split=split)


def write_idx(images_u8: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write an (N, H, W) u8 image stack and labels as an IDX file pair."""
    n, h, w = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(np.ascontiguousarray(images_u8, dtype=np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------

def load_cifar10(batch_paths, split: str = "") -> Dataset:
    """Parse CIFAR-10 binary batch files (3073-byte records: label byte
    then 3072 channel-major R,G,B pixels of a 32x32 image)."""
    if isinstance(batch_paths, (str, bytes)) or hasattr(batch_paths, "__fspath__"):
        batch_paths = [batch_paths]
    all_images, all_labels = [], []
    for path in batch_paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise TruncatedPayloadError(
                f"{path}: {len(raw)} bytes is not a whole number of "
                f"{CIFAR_RECORD_BYTES}-byte records")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        all_labels.append(records[:, 0].astype(np.int64))
        all_images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(all_images).astype(np.float32) / 255.0
    labels = np.concatenate(all_labels)
    return Dataset(images=images, labels=labels, split=split)


def write_cifar10(images_u8: np.ndarray, labels: np.ndarray, path):
    """Write an (N, 3, 32, 32) u8 stack in the CIFAR-10 batch format."""
    n = images_u8.shape[0]
    records = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images_u8.reshape(n, -1)
    with open(path, "wb") as f:
        f.write(records.tobytes())


# ---------------------------------------------------------------------------
# Desk-scale datasets
# ---------------------------------------------------------------------------

def digits_arrays(resolution: int = 28):
    """The classic 8x8 handwritten digits, upsampled to `resolution` and
    quantized to u8. Returns (images_u8 (N, R, R), labels)."""
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    digits = load_digits()
    imgs = digits.images / 16.0                      # (N, 8, 8) in [0, 1]
    factor = resolution / imgs.shape[1]
    up = zoom(imgs, (1, factor, factor), order=1)
    up = np.clip(up, 0.0, 1.0)
    return (up * 255).astype(np.uint8), digits.target.astype(np.int64)


def make_digits_idx(out_dir, resolution: int = 28, test_fraction: float = 0.2,
                    seed: int = 0):
    """Write train/test IDX pairs of the upsampled digits set into
    `out_dir`. Returns ((train_images, train_labels), (test_images,
    test_labels)) file paths."""
    import os

    images, labels = digits_arrays(resolution)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    n_test = int(len(labels) * test_fraction)
    test_idx, train_idx = order[:n_test], order[n_test:]
    paths = []
    for tag, idx in (("train", train_idx), ("test", test_idx)):
        ip = os.path.join(out_dir, f"digits-{tag}-images-idx3-ubyte")
        lp = os.path.join(out_dir, f"digits-{tag}-labels-idx1-ubyte")
        write_idx(images[idx], labels[idx], ip, lp)
        paths.append((ip, lp))
    return tuple(paths)


def synthetic_color_arrays(n: int, num_classes: int = 10, seed: int = 0,
                           signal: float = 0.8, shift: int = 2):
    """Learnable 3x32x32 synthetic image classes: each class is a smooth
    random template, samples add spatial jitter, amplitude jitter and
    pixel noise. Returns (images_u8 (N, 3, 32, 32), labels)."""
    from scipy.ndimage import zoom

    rng = np.random.default_rng(seed)
    templates = []
    for _ in range(num_classes):
        low = rng.normal(0.0, 1.0, size=(3, 4, 4))
        t = zoom(low, (1, 8, 8), order=3)
        t /= np.abs(t).max()
        templates.append(t)
    templates = np.stack(templates)                  # (K, 3, 32, 32)
    labels = rng.integers(0, num_classes, size=n)
    noise = rng.normal(0.0, 1.0, size=(n, 3, 32, 32))
    amp = rng.uniform(0.7, 1.3, size=(n, 1, 1, 1))
    base = templates[labels] * amp * signal + noise * (1.0 - signal)
    if shift > 0:
        shifts = rng.integers(-shift, shift + 1, size=(n, 2))
        for i in range(n):
            base[i] = np.roll(base[i], tuple(shifts[i]), axis=(1, 2))
    imgs = np.clip(0.5 + 0.4 * base, 0.0, 1.0)
    return (imgs * 255).astype(np.uint8), labels.astype(np.int64)


def make_synthetic_cifar(out_dir, n_train: int = 8000, n_test: int = 2000,
                         num_classes: int = 10, seed: int = 0,
                         signal: float = 0.8):
    """Write synthetic train/test batches in the CIFAR-10 binary format.
    Returns (train_path, test_path)."""
    import os

    images, labels = synthetic_color_arrays(n_train + n_test, num_classes,
                                            seed, signal)
    train_path = os.path.join(out_dir, "synth_train.bin")
    test_path = os.path.join(out_dir, "synth_test.bin")
    write_cifar10(images[:n_train], labels[:n_train], train_path)
    write_cifar10(images[n_train:], labels[n_train:], test_path)
    return train_path, test_path
