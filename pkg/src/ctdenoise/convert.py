"""One-time conversion of vendor datasets into the portable on-disk format.

This is boundary code for the ``convert`` subcommand: the rest of the package
only ever reads manifests.  Supported inputs are the FashionMNIST/MNIST idx
files (optionally gzipped) and the CIFAR-10 python pickle batches.
Standardization statistics are computed on the training split and stored in
both manifests, so loads return standardized features.
"""

from __future__ import annotations

import gzip
import os
import pickle
import struct

import numpy as np

from .data import DatasetManifest, LabeledDataset, compute_standardization, save_dataset
from .errors import MissingFileError, ValidationError

FASHION_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _open_maybe_gz(path: str):
    if os.path.isfile(path + ".gz"):
        return gzip.open(path + ".gz", "rb")
    if os.path.isfile(path):
        return open(path, "rb")
    raise MissingFileError(f"neither {path} nor {path}.gz exists")


def read_idx_images(path: str) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        magic, n, rows, cols = struct.unpack(">IIII", fh.read(16))
        if magic != 2051:
            raise ValidationError(f"{path}: bad idx image magic {magic}")
        data = np.frombuffer(fh.read(n * rows * cols), dtype=np.uint8)
    return data.reshape(n, 1, rows, cols)


def read_idx_labels(path: str) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        magic, n = struct.unpack(">II", fh.read(8))
        if magic != 2049:
            raise ValidationError(f"{path}: bad idx label magic {magic}")
        data = np.frombuffer(fh.read(n), dtype=np.uint8)
    return data.astype(np.int64)


def _read_cifar10(input_dir: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    train_x, train_y = [], []
    for i in range(1, 6):
        path = os.path.join(input_dir, f"data_batch_{i}")
        if not os.path.isfile(path):
            raise MissingFileError(f"CIFAR-10 batch not found: {path}")
        with open(path, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        train_x.append(np.asarray(batch[b"data"], dtype=np.uint8))
        train_y.append(np.asarray(batch[b"labels"], dtype=np.int64))
    test_path = os.path.join(input_dir, "test_batch")
    if not os.path.isfile(test_path):
        raise MissingFileError(f"CIFAR-10 test batch not found: {test_path}")
    with open(test_path, "rb") as fh:
        batch = pickle.load(fh, encoding="bytes")
    x_train = np.concatenate(train_x).reshape(-1, 3, 32, 32)
    y_train = np.concatenate(train_y)
    x_test = np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
    y_test = np.asarray(batch[b"labels"], dtype=np.int64)
    return x_train, y_train, x_test, y_test


def convert_vendor_dataset(
    fmt: str,
    input_dir: str,
    output_dir: str,
    name: str | None = None,
    train_limit: int | None = None,
    test_limit: int | None = None,
) -> tuple[str, str]:
    """Convert a vendor dataset; returns (train manifest path, test manifest path)."""
    if fmt == "fashion-mnist":
        name = name or "fashion-mnist"
        x_train = read_idx_images(os.path.join(input_dir, FASHION_MNIST_FILES["train_images"]))
        y_train = read_idx_labels(os.path.join(input_dir, FASHION_MNIST_FILES["train_labels"]))
        x_test = read_idx_images(os.path.join(input_dir, FASHION_MNIST_FILES["test_images"]))
        y_test = read_idx_labels(os.path.join(input_dir, FASHION_MNIST_FILES["test_labels"]))
        num_classes = 10
    elif fmt == "cifar10":
        name = name or "cifar10"
        x_train, y_train, x_test, y_test = _read_cifar10(input_dir)
        num_classes = 10
    else:
        raise ValidationError(f"unknown vendor format {fmt!r}")

    if train_limit is not None:
        x_train, y_train = x_train[:train_limit], y_train[:train_limit]
    if test_limit is not None:
        x_test, y_test = x_test[:test_limit], y_test[:test_limit]

    x_train = x_train.astype(np.float32)
    x_test = x_test.astype(np.float32)
    stats = compute_standardization(x_train, x_train.shape[1:])

    paths = []
    for split_name, (x, y) in (("train", (x_train, y_train)), ("test", (x_test, y_test))):
        manifest = DatasetManifest(
            name=f"{name}-{split_name}",
            num_classes=num_classes,
            feature_shape=tuple(x.shape[1:]),
            num_examples=x.shape[0],
            feature_blob_path="",  # filled by save_dataset
            label_path="",
        )
        ds = LabeledDataset(features=x, manifest=manifest, clean_labels=y)
        paths.append(save_dataset(ds, output_dir, name=manifest.name, standardization=stats))
    return paths[0], paths[1]


__all__ = [
    "convert_vendor_dataset",
    "read_idx_images",
    "read_idx_labels",
]
