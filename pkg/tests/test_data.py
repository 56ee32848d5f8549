import gzip
import struct

import numpy as np
import pytest

from axsub.data import (CIFAR_RECORD, DATA_ENV, DatasetError, IDX_IMAGES, IDX_LABELS, MNIST_MEAN, MNIST_STD,
                        data_root, load_cifar10_bin, load_dataset, load_mnist_idx, read_idx, write_idx)


def _mnist_pair(tmp_path, n=5, h=4, w=3, labels=None, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, (n, h, w)).astype(np.uint8)
    labs = np.asarray(labels if labels is not None else rng.integers(0, 10, n), dtype=np.uint8)
    write_idx(tmp_path / "img", imgs)
    write_idx(tmp_path / "lab", labs)
    return imgs, labs


def test_idx_round_trip_and_header(tmp_path):
    imgs, labs = _mnist_pair(tmp_path)
    raw = (tmp_path / "img").read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (IDX_IMAGES, 5, 4, 3)
    assert struct.unpack(">II", (tmp_path / "lab").read_bytes()[:8]) == (IDX_LABELS, 5)
    assert np.array_equal(read_idx(tmp_path / "img", IDX_IMAGES), imgs)
    x, y = load_mnist_idx(tmp_path / "img", tmp_path / "lab", normalize=False)
    assert x.shape == (5, 1, 4, 3) and x.max() <= 1.0
    assert np.allclose(x[:, 0] * 255.0, imgs)
    assert np.array_equal(y, labs)
    xn, _ = load_mnist_idx(tmp_path / "img", tmp_path / "lab")
    assert np.allclose(xn, (x - MNIST_MEAN[0]) / MNIST_STD[0])


def test_idx_truncation_reports_offset(tmp_path):
    _mnist_pair(tmp_path)
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "cut").write_bytes(raw[:30])
    with pytest.raises(DatasetError, match="byte offset 30.*expected 76"):
        read_idx(tmp_path / "cut", IDX_IMAGES)
    (tmp_path / "cut").write_bytes(raw[:10])
    with pytest.raises(DatasetError, match="truncated header at byte offset 10"):
        read_idx(tmp_path / "cut")


def test_idx_bad_magic(tmp_path):
    _mnist_pair(tmp_path)
    with pytest.raises(DatasetError, match="magic 0x00000801 != expected 0x00000803"):
        load_mnist_idx(tmp_path / "lab", tmp_path / "lab")


def test_mnist_label_checks(tmp_path):
    _mnist_pair(tmp_path, labels=[1, 2, 11, 3, 4])
    with pytest.raises(DatasetError, match="label 11 at index 2"):
        load_mnist_idx(tmp_path / "img", tmp_path / "lab")
    write_idx(tmp_path / "lab", np.zeros(4, dtype=np.uint8))
    with pytest.raises(DatasetError, match="5 images but 4 labels"):
        load_mnist_idx(tmp_path / "img", tmp_path / "lab")


def test_gzip_fallback(tmp_path):
    imgs, labs = _mnist_pair(tmp_path)
    for name in ("img", "lab"):
        p = tmp_path / name
        (tmp_path / (name + ".gz")).write_bytes(gzip.compress(p.read_bytes()))
        p.unlink()
    x, y = load_mnist_idx(tmp_path / "img", tmp_path / "lab", normalize=False)
    assert np.array_equal(y, labs)


def _cifar_records(n, seed=0, bad_label=None):
    rng = np.random.default_rng(seed)
    rec = rng.integers(0, 256, (n, CIFAR_RECORD)).astype(np.uint8)
    rec[:, 0] = rng.integers(0, 10, n)
    if bad_label is not None:
        rec[bad_label, 0] = 10
    return rec


def test_cifar_records(tmp_path):
    rec = _cifar_records(7)
    (tmp_path / "test_batch.bin").write_bytes(rec.tobytes())
    x, y = load_cifar10_bin(tmp_path / "test_batch.bin", normalize=False)
    assert x.shape == (7, 3, 32, 32) and y.min() >= 0 and y.max() <= 9
    # channel-planar: the first 1024 pixel bytes are the red plane
    assert np.allclose(x[3, 0].ravel() * 255, rec[3, 1:1025])
    assert np.allclose(x[3, 2].ravel() * 255, rec[3, 2049:])
    xt, yt = load_dataset(tmp_path, "cifar10", "test", normalize=False)
    assert np.array_equal(yt, y)


def test_cifar_truncated_and_label(tmp_path):
    rec = _cifar_records(3).tobytes()
    (tmp_path / "b.bin").write_bytes(rec[:-100])
    with pytest.raises(DatasetError, match=f"byte offset {2 * CIFAR_RECORD}"):
        load_cifar10_bin(tmp_path / "b.bin")
    (tmp_path / "b.bin").write_bytes(_cifar_records(3, bad_label=1).tobytes())
    with pytest.raises(DatasetError, match="record 1 out of range"):
        load_cifar10_bin(tmp_path / "b.bin")


def test_data_root_env(tmp_path, monkeypatch):
    monkeypatch.delenv(DATA_ENV, raising=False)
    with pytest.raises(DatasetError, match=DATA_ENV):
        data_root()
    monkeypatch.setenv(DATA_ENV, str(tmp_path))
    assert data_root() == tmp_path
    with pytest.raises(DatasetError, match="unknown dataset"):
        load_dataset(tmp_path, "imagenet")
    with pytest.raises(DatasetError, match="no CIFAR-10"):
        load_dataset(tmp_path, "cifar10", "train")


def test_exported_digits(digits_dir, digits):
    (xtr, ytr), (xte, yte) = digits
    assert xtr.shape == (1297, 1, 8, 8) and xte.shape == (500, 1, 8, 8)
    assert set(np.unique(ytr)) == set(range(10))
    raw = read_idx(digits_dir / "train-images-idx3-ubyte", IDX_IMAGES)
    assert raw.max() == 255
