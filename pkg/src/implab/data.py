"""Desk-scale datasets: synthetic generators and an IDX reader/writer."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from implab.exceptions import FormatError
from implab.model import Batch


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X_train = np.ascontiguousarray(self.X_train, dtype=np.float64)
        self.X_test = np.ascontiguousarray(self.X_test, dtype=np.float64)
        self.y_train = np.ascontiguousarray(self.y_train, dtype=np.int64)
        self.y_test = np.ascontiguousarray(self.y_test, dtype=np.int64)
        if len(self.X_train) != len(self.y_train) or len(self.X_test) != len(self.y_test):
            raise ValueError("inputs and labels disagree in length")

    @property
    def n_features(self) -> int:
        return int(np.prod(self.X_train.shape[1:]))

    @property
    def train(self) -> Batch:
        return Batch(self.X_train, self.y_train)

    @property
    def test(self) -> Batch:
        return Batch(self.X_test, self.y_test)

    def steps_per_epoch(self, batch_size: int) -> int:
        return -(-len(self.y_train) // batch_size)

    def epoch_order(self, seed: int, epoch: int) -> np.ndarray:
        """Shuffled example order of one epoch; a pure function of ``(seed, epoch)``."""
        return np.random.default_rng([int(seed), int(epoch)]).permutation(len(self.y_train))

    def batch_indices(self, seed: int, step: int, batch_size: int) -> np.ndarray:
        spe = self.steps_per_epoch(batch_size)
        epoch, k = divmod(step, spe)
        order = self.epoch_order(seed, epoch)
        return order[k * batch_size:(k + 1) * batch_size]

    def train_batches(self, seed: int, epoch: int, batch_size: int) -> list[Batch]:
        order = self.epoch_order(seed, epoch)
        return [
            Batch(self.X_train[order[i:i + batch_size]], self.y_train[order[i:i + batch_size]])
            for i in range(0, len(order), batch_size)
        ]

    def subsample(self, n_train: int | None = None, n_test: int | None = None, seed: int = 0) -> "Dataset":
        rng = np.random.default_rng(seed)
        itr = np.sort(rng.permutation(len(self.y_train))[:n_train]) if n_train else slice(None)
        ite = np.sort(rng.permutation(len(self.y_test))[:n_test]) if n_test else slice(None)
        return Dataset(self.X_train[itr], self.y_train[itr], self.X_test[ite], self.y_test[ite],
                       self.n_classes, dict(self.descriptor, subsample=[n_train, n_test, seed]))


def two_spirals(n_train=2000, n_test=2000, noise=0.5, turns=1.5, label_noise=0.0, seed=0) -> Dataset:
    """Two interleaved spirals in the plane.

    Train and test come from one draw split by position, so they are disjoint.
    """
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    t = np.sqrt(rng.uniform(0.0, 1.0, n)) * turns * 2 * np.pi
    y = rng.integers(0, 2, n)
    r = t / (turns * 2 * np.pi) * 5.0
    angle = t + np.pi * y
    X = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    X += rng.normal(0.0, noise * 0.2, X.shape)
    if label_noise:
        flip = rng.uniform(size=n) < label_noise
        y = np.where(flip, 1 - y, y)
    desc = dict(kind="two_spirals", n_train=n_train, n_test=n_test, noise=noise, turns=turns,
                label_noise=label_noise, seed=seed)
    return Dataset(X[:n_train], y[:n_train], X[n_train:], y[n_train:], 2, desc)


def gaussian_mixture(n_train=4000, n_test=4000, n_features=16, n_classes=4, clusters_per_class=3,
                     spread=1.0, separation=2.5, seed=0) -> Dataset:
    """Classes made of several isotropic Gaussian clusters with random centers."""
    rng = np.random.default_rng(seed)
    n_clusters = n_classes * clusters_per_class
    centers = rng.normal(0.0, separation / np.sqrt(2.0), (n_clusters, n_features))
    cluster_label = np.arange(n_clusters) % n_classes
    n = n_train + n_test
    which = rng.integers(0, n_clusters, n)
    X = centers[which] + rng.normal(0.0, spread, (n, n_features))
    y = cluster_label[which]
    desc = dict(kind="gaussian_mixture", n_train=n_train, n_test=n_test, n_features=n_features,
                n_classes=n_classes, clusters_per_class=clusters_per_class, spread=spread,
                separation=separation, seed=seed)
    return Dataset(X[:n_train], y[:n_train], X[n_train:], y[n_train:], n_classes, desc)


_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (big-endian magic ``00 00 type ndim``, then u32 dims)."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise FormatError(f"{path}: unknown IDX element type 0x{code:02x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    dtype = _IDX_DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    if len(raw) - header != count * dtype.itemsize:
        raise FormatError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array) -> None:
    array = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("=").str: k for k, v in _IDX_DTYPES.items()}
    key = array.dtype.newbyteorder("=").str
    if key not in codes:
        raise FormatError(f"dtype {array.dtype} has no IDX code")
    code = codes[key]
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, code, array.ndim]))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.astype(_IDX_DTYPES[code]).tobytes())


def idx_dataset(train_images, train_labels, test_images, test_labels, scale=255.0, flatten=True) -> Dataset:
    """Load an MNIST-style split from four IDX files."""
    def images(p):
        x = read_idx(p).astype(np.float64) / scale
        return x.reshape(len(x), -1) if flatten else x[:, None] if x.ndim == 3 else x

    Xtr, Xte = images(train_images), images(test_images)
    ytr, yte = read_idx(train_labels).astype(np.int64), read_idx(test_labels).astype(np.int64)
    n_classes = int(max(ytr.max(), yte.max())) + 1
    desc = dict(kind="idx", files=[str(train_images), str(train_labels), str(test_images), str(test_labels)])
    return Dataset(Xtr, ytr, Xte, yte, n_classes, desc)


def make_dataset(descriptor: dict) -> Dataset:
    desc = dict(descriptor)
    kind = desc.pop("kind")
    subsample = desc.pop("subsample", None)
    if kind == "two_spirals":
        ds = two_spirals(**desc)
    elif kind == "gaussian_mixture":
        ds = gaussian_mixture(**desc)
    elif kind == "idx":
        ds = idx_dataset(*desc.pop("files"), **desc)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if subsample:
        ds = ds.subsample(*subsample)
    return ds
