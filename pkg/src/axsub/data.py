"""MNIST IDX and CIFAR-10 binary readers.

Images come back as float64 ``(N, C, H, W)`` scaled to [0, 1] and then
standardized with the dataset constants below (pass ``normalize=False`` to
skip that); labels as int64.
"""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
IDX_IMAGES, IDX_LABELS = 0x00000803, 0x00000801
CIFAR_RECORD = 3073
DATA_ENV = "AXSUB_DATA"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DatasetError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def read_idx(path, expect_magic=None) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated file, {len(raw)} bytes, header needs 4 at offset 0")
    magic = struct.unpack(">I", raw[:4])[0]
    if expect_magic is not None and magic != expect_magic:
        raise DatasetError(f"{path}: magic 0x{magic:08x} != expected 0x{expect_magic:08x}")
    if magic >> 8 != 0x08:
        raise DatasetError(f"{path}: unsupported IDX type in magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DatasetError(f"{path}: truncated header at byte offset {len(raw)}, expected {head} bytes")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = head + int(np.prod(dims))
    if len(raw) < need:
        raise DatasetError(f"{path}: truncated file at byte offset {len(raw)}, expected {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need - head, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def _standardize(x, mean, std):
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return (x - m) / s


def load_mnist_idx(images_path, labels_path, normalize: bool = True, n_classes: int = 10):
    imgs = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS).astype(np.int64)
    if imgs.shape[0] != labels.shape[0]:
        raise DatasetError(f"{images_path}: {imgs.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise DatasetError(f"{labels_path}: label {labels[bad]} at index {bad} out of range [0, {n_classes - 1}]")
    x = imgs.astype(np.float64)[:, None, :, :] / 255.0
    if normalize:
        x = _standardize(x, MNIST_MEAN, MNIST_STD)
    return x, labels


def load_cifar10_bin(path, normalize: bool = True):
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        full = len(raw) // CIFAR_RECORD * CIFAR_RECORD
        raise DatasetError(f"{path}: truncated record at byte offset {full} "
                           f"({len(raw) - full} of {CIFAR_RECORD} bytes)")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetError(f"{path}: label {labels[bad]} in record {bad} out of range [0, 9]")
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    if normalize:
        x = _standardize(x, CIFAR10_MEAN, CIFAR10_STD)
    return x, labels


def data_root(path=None) -> Path:
    if path is not None:
        return Path(path)
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    raise DatasetError(f"no dataset path given and ${DATA_ENV} is unset")


def load_dataset(root, kind: str = "mnist", split: str = "train", normalize: bool = True):
    """Load a split from a directory holding the standard file names (optionally gzipped)."""
    root = data_root(root)
    if kind == "mnist":
        img, lab = MNIST_FILES[split]
        return load_mnist_idx(root / img, root / lab, normalize)
    if kind == "cifar10":
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        parts = [load_cifar10_bin(root / n, normalize) for n in names if (root / n).exists()]
        if not parts:
            raise DatasetError(f"{root}: no CIFAR-10 {split} batches found")
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    raise DatasetError(f"unknown dataset kind {kind!r}")


def export_digits_idx(out_dir, test_size: int = 500, seed: int = 0) -> Path:
    """Write scikit-learn's bundled 8x8 handwritten digits as MNIST-style IDX files.

    Pixel values 0..16 are rescaled to 0..255.  Stands in for MNIST where
    the real files are not available.
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    img = np.rint(d.images * (255.0 / 16.0)).astype(np.uint8)
    lab = d.target.astype(np.uint8)
    order = np.random.default_rng(seed).permutation(len(lab))
    test, train = order[:test_size], order[test_size:]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train), ("test", test)):
        fi, fl = MNIST_FILES[split]
        write_idx(out / fi, img[idx])
        write_idx(out / fl, lab[idx])
    return out
