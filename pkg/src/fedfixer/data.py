"""Dataset loading: IDX image/label files and synthetic Gaussian mixtures.

The IDX parser understands the classic big-endian, magic-number framed
format used by the MNIST distribution (0x00000803 for image tensors,
0x00000801 for label vectors), transparently handling ``.gz`` files.
Pixels are scaled to [0, 1]; images are flattened to feature rows.

`gen_synthetic` produces isotropic Gaussian blobs with uniform class
priors and a controllable pairwise distance between class means, which
stands in for image benchmarks when experiments must stay desk-scale.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class RawDataset:
    features: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64
    split: str  # "train" or "test"

    def __post_init__(self):
        if len(self.features) != len(self.labels) or len(self.features) == 0:
            raise DataError("features and labels must be non-empty and equally long")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(images_path: str | Path, labels_path: str | Path, split: str = "train") -> RawDataset:
    """Parse an IDX image file plus its label file into a flat-feature dataset."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)

    if len(img) < 16:
        raise DataError(f"truncated image file {images_path}: no header")
    magic, count, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IMAGE_MAGIC:
        raise DataError(f"bad image magic 0x{magic:08x} in {images_path}")
    expected = 16 + count * rows * cols
    if len(img) < expected:
        raise DataError(
            f"truncated image file {images_path}: {len(img)} bytes, expected {expected}"
        )

    if len(lab) < 8:
        raise DataError(f"truncated label file {labels_path}: no header")
    lmagic, lcount = struct.unpack(">II", lab[:8])
    if lmagic != LABEL_MAGIC:
        raise DataError(f"bad label magic 0x{lmagic:08x} in {labels_path}")
    if lcount != count:
        raise DataError(f"count mismatch: {count} images but {lcount} labels")
    if len(lab) < 8 + lcount:
        raise DataError(f"truncated label file {labels_path}")

    pixels = np.frombuffer(img, dtype=np.uint8, count=count * rows * cols, offset=16)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)
    return RawDataset(features=features, labels=labels, split=split)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(directory: str | Path, split: str) -> tuple[Path, Path] | None:
    """Locate the standard file pair for a split, gzipped or not."""
    directory = Path(directory)
    images, labels = MNIST_FILES[split]
    for suffix in ("", ".gz"):
        ipath = directory / (images + suffix)
        lpath = directory / (labels + suffix)
        if ipath.exists() and lpath.exists():
            return ipath, lpath
    return None


def load_mnist(directory: str | Path, split: str = "train") -> RawDataset:
    found = find_mnist(directory, split)
    if found is None:
        raise DataError(
            f"MNIST {split} files not found under {directory}; expected "
            f"{MNIST_FILES[split][0]}[.gz] and {MNIST_FILES[split][1]}[.gz]"
        )
    return load_idx(found[0], found[1], split=split)


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-mixture classification data.

    `separation` is the pairwise Euclidean distance between class means in
    units of the per-class standard deviation `scale`. With L <= dim the
    means sit on scaled coordinate axes, making the distance exact.
    """

    num_classes: int
    dim: int
    separation: float
    scale: float = 1.0
    train_size: int = 1000
    test_size: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.dim < 1 or self.train_size < 1 or self.test_size < 1:
            raise ConfigError("dim and sizes must be positive")
        if self.separation < 0 or self.scale <= 0:
            raise ConfigError("separation must be >= 0 and scale > 0")


def _class_means(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    radius = spec.separation * spec.scale / np.sqrt(2.0)
    if spec.num_classes <= spec.dim:
        means = np.zeros((spec.num_classes, spec.dim))
        means[np.arange(spec.num_classes), np.arange(spec.num_classes)] = radius
        return means
    directions = rng.standard_normal((spec.num_classes, spec.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return radius * directions


def gen_synthetic(spec: SyntheticSpec) -> tuple[RawDataset, RawDataset]:
    """Seeded train/test draw from the mixture; same seed, same bytes."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed]))
    means = _class_means(spec, rng)
    datasets = []
    for size, split in ((spec.train_size, "train"), (spec.test_size, "test")):
        labels = rng.integers(0, spec.num_classes, size=size)
        features = means[labels] + spec.scale * rng.standard_normal((size, spec.dim))
        datasets.append(RawDataset(features=features, labels=labels, split=split))
    return datasets[0], datasets[1]


def subsample(dataset: RawDataset, limit: int, rng: np.random.Generator) -> RawDataset:
    """Random subset without replacement; returns the dataset itself if small enough."""
    if limit >= len(dataset):
        return dataset
    idx = np.sort(rng.choice(len(dataset), size=limit, replace=False))
    return RawDataset(
        features=dataset.features[idx], labels=dataset.labels[idx], split=dataset.split
    )
