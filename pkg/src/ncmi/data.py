"""Dataset provisioning: seeded synthetic generators, IDX loading, CSV exchange."""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
STD_FLOOR = 1e-8


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"
    stats: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if len(self.inputs) == 0:
            raise ValueError("dataset is empty")
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def flat_inputs(self) -> np.ndarray:
        return self.inputs.reshape(len(self), -1)


class DatasetSplits(NamedTuple):
    train: LabeledDataset
    test: LabeledDataset


def _split(x, y, n_classes, rng, train_fraction=0.8) -> DatasetSplits:
    order = rng.permutation(len(y))
    x, y = x[order], y[order]
    n_train = int(round(train_fraction * len(y)))
    return DatasetSplits(LabeledDataset(x[:n_train], y[:n_train], n_classes, "train"),
                         LabeledDataset(x[n_train:], y[n_train:], n_classes, "test"))


def class_directions(n_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors, mutually orthogonal when n_classes <= dim."""
    g = rng.normal(size=(dim, max(n_classes, dim)))
    if n_classes <= dim:
        q, _ = np.linalg.qr(g[:, :n_classes])
        return q.T
    u = g[:, :n_classes].T
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def gen_gaussian_blobs(n_per_class: int, n_classes: int, dim: int, separation: float,
                       spread: float, seed: int) -> DatasetSplits:
    """Isotropic Gaussian clusters centred at ``separation * u_y``; 80/20 split."""
    if n_classes < 2 or dim < 2:
        raise ValueError("blobs need at least 2 classes and 2 dimensions")
    if n_per_class < 5:
        raise ValueError(f"n_per_class must be at least 5, got {n_per_class}")
    rng = np.random.default_rng(seed)
    centers = separation * class_directions(n_classes, dim, rng)
    y = np.repeat(np.arange(n_classes), n_per_class)
    x = centers[y] + spread * rng.normal(size=(len(y), dim))
    return _split(x, y, n_classes, rng)


def gen_rings(n_per_class: int, n_classes: int, seed: int, noise: float = 0.1) -> DatasetSplits:
    """Concentric 2-D annuli; class y has radius y + 1."""
    if not 2 <= n_classes <= 6:
        raise ValueError(f"rings support 2..6 classes, got {n_classes}")
    if n_per_class < 5:
        raise ValueError(f"n_per_class must be at least 5, got {n_per_class}")
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(n_classes), n_per_class)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=len(y))
    radius = y + 1.0 + noise * rng.normal(size=len(y))
    x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    return _split(x, y, n_classes, rng)


# -- IDX --------------------------------------------------------------------

class IdxError(ValueError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path} (offset {offset}): {message}")
        self.path = path
        self.offset = offset


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


def _read_idx(path, expected_magic, expected_ndim):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxTruncatedError(path, 0, "file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(path, 0, f"magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header_end = 4 + 4 * expected_ndim
    if len(raw) < header_end:
        raise IdxTruncatedError(path, len(raw), "header truncated")
    dims = struct.unpack(f">{expected_ndim}I", raw[4:header_end])
    need = int(np.prod(dims))
    body = raw[header_end:]
    if len(body) < need:
        raise IdxTruncatedError(path, len(raw),
                                f"expected {need} data bytes after offset {header_end}, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array (1-D labels or 3-D images) in IDX format."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def standardization_stats(images: np.ndarray) -> dict:
    """Per-channel mean/std over (N, H, W[, ch]) images scaled to [0, 1]."""
    axes = (0, 1, 2) if images.ndim == 4 else None
    mean = np.atleast_1d(images.mean(axis=axes))
    std = np.maximum(np.atleast_1d(images.std(axis=axes)), STD_FLOOR)
    return {"mean": mean.tolist(), "std": std.tolist()}


def load_idx(images_path, labels_path, split: str = "train", stats: dict | None = None,
             n_classes: int | None = None) -> LabeledDataset:
    """Load an IDX image/label pair, scale to [0, 1] and standardize.

    Pass the ``stats`` of the training split when loading a test split so no
    test statistics leak into preprocessing.
    """
    images = _read_idx(images_path, IMAGE_MAGIC, 3).astype(np.float64) / 255.0
    labels = _read_idx(labels_path, LABEL_MAGIC, 1).astype(np.intp)
    if len(images) != len(labels):
        raise IdxCountMismatchError(labels_path, 4,
                                    f"{len(labels)} labels for {len(images)} images in {images_path}")
    if stats is None:
        stats = standardization_stats(images)
    x = (images - np.asarray(stats["mean"])) / np.asarray(stats["std"])
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    return LabeledDataset(x, labels, n_classes, split, stats)


# -- CSV -------------------------------------------------------------------

def write_csv(path, dataset: LabeledDataset) -> None:
    x = dataset.flat_inputs
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["label"])
        for row, label in zip(x, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def read_csv(path, split: str, n_classes: int | None = None) -> LabeledDataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if not header or header[-1] != "label":
            raise ValueError(f"{path}: last column must be 'label'")
        rows = [line for line in r if line]
    x = np.array([[float(v) for v in row[:-1]] for row in rows])
    y = np.array([int(row[-1]) for row in rows], dtype=np.intp)
    if n_classes is None:
        n_classes = int(y.max()) + 1
    return LabeledDataset(x, y, n_classes, split)


IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_dir(path) -> DatasetSplits:
    """Read ``train.csv``/``test.csv`` or the standard IDX file pairs from a directory."""
    csv_train = os.path.join(path, "train.csv")
    if os.path.exists(csv_train):
        train = read_csv(csv_train, "train")
        test = read_csv(os.path.join(path, "test.csv"), "test")
        c = max(train.n_classes, test.n_classes)
        train.n_classes = test.n_classes = c
        return DatasetSplits(train, test)
    img, lab = (os.path.join(path, n) for n in IDX_NAMES["train"])
    if not os.path.exists(img):
        raise FileNotFoundError(f"{path}: no train.csv or {IDX_NAMES['train'][0]}")
    train = load_idx(img, lab, "train")
    timg, tlab = (os.path.join(path, n) for n in IDX_NAMES["test"])
    test = load_idx(timg, tlab, "test", stats=train.stats)
    c = max(train.n_classes, test.n_classes)
    train.n_classes = test.n_classes = c
    return DatasetSplits(train, test)
