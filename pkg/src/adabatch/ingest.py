"""Dataset loading: CIFAR-10 binary batches, IDX image/label files, and
seeded synthetic blob classification data.

Pixel bytes are scaled to [0, 1] here; mean/std standardization is the
training pipeline's job (it must use training-split statistics only).
"""

import numpy as np
from dataclasses import dataclass
from pathlib import Path

from .errors import DataFormatError
from .tensor import Rng

CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 channel-major pixels
CIFAR_IMAGE = (3, 32, 32)


@dataclass
class Dataset:
    """Sample matrix (one row per sample), integer labels, split metadata."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str
    image: tuple | None = None  # (channels, height, width) when image-shaped
    warning: str | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DataFormatError(
                f"dataset: features {self.features.shape} vs labels {self.labels.shape}")
        if self.size < 1:
            raise DataFormatError("dataset: empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataFormatError(
                f"dataset: label outside [0, {self.num_classes})")
        if not np.isfinite(self.features).all():
            raise DataFormatError("dataset: non-finite feature values")

    @property
    def size(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


def read_cifar10_bin(paths, split="train"):
    """Parse CIFAR-10 binary batch files: 3073-byte records, one label byte
    then 1024 red, 1024 green, 1024 blue row-major 32x32 pixels."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    features = []
    labels = []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0:
            raise DataFormatError(f"{path}: empty file")
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(
                f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD} "
                f"(stray bytes from offset {len(raw) - len(raw) % CIFAR_RECORD})")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = records[:, 0]
        bad = np.nonzero(lab > 9)[0]
        if bad.size:
            raise DataFormatError(
                f"{path}: label byte {int(lab[bad[0]])} > 9 at record {int(bad[0])} "
                f"(byte offset {int(bad[0]) * CIFAR_RECORD})")
        labels.append(lab.astype(np.int64))
        features.append(records[:, 1:].astype(np.float64) / 255.0)
    return Dataset(np.concatenate(features), np.concatenate(labels),
                   num_classes=10, split=split, image=CIFAR_IMAGE)


def read_idx(path):
    """Parse one IDX file: 00 00 | dtype 0x08 | rank | rank u32 dims | payload.

    Returns ("images", (N, H, W) uint8 array) for rank 3 and
    ("labels", (N,) uint8 array) for rank 1.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: header truncated at {len(raw)} bytes")
    if raw[0] != 0 or raw[1] != 0:
        raise DataFormatError(f"{path}: nonzero leading bytes {raw[0]:#04x} {raw[1]:#04x}")
    if raw[2] != 0x08:
        raise DataFormatError(f"{path}: unsupported dtype code {raw[2]:#04x} (need 0x08)")
    rank = raw[3]
    if rank not in (1, 3):
        raise DataFormatError(f"{path}: unsupported rank {rank} (need 1 or 3)")
    header = 4 + 4 * rank
    if len(raw) < header:
        raise DataFormatError(f"{path}: dimension block truncated")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(rank)]
    expected = int(np.prod(dims))
    payload = len(raw) - header
    if payload != expected:
        raise DataFormatError(
            f"{path}: payload length mismatch, expected {expected} bytes got {payload}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    return ("images" if rank == 3 else "labels"), data


def pair_idx(images_path, labels_path, split="train", num_classes=10):
    """Combine an IDX image file and an IDX label file into a Dataset."""
    kind_i, images = read_idx(images_path)
    kind_l, labels = read_idx(labels_path)
    if kind_i != "images":
        raise DataFormatError(f"{images_path}: expected an image file (rank 3)")
    if kind_l != "labels":
        raise DataFormatError(f"{labels_path}: expected a label file (rank 1)")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"idx pair: {images.shape[0]} images vs {labels.shape[0]} labels")
    n, h, w = images.shape
    feats = images.reshape(n, h * w).astype(np.float64) / 255.0
    return Dataset(feats, labels.astype(np.int64), num_classes=num_classes,
                   split=split, image=(1, h, w))


def _simplex_centers(num_classes, dim, radius=2.0):
    """Regular simplex vertices on a radius-`radius` sphere, embedded in the
    first num_classes coordinates. Fully deterministic."""
    m = num_classes
    verts = np.eye(m) - 1.0 / m
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    centers = np.zeros((m, dim))
    centers[:, :m] = radius * verts
    return centers


def synth_blobs(num_classes, dim, per_class, spread, seed):
    """Gaussian blobs around simplex centers, split 80/20 by a seeded shuffle."""
    if num_classes < 2:
        raise ValueError(f"synth_blobs: need >= 2 classes, got {num_classes}")
    if per_class < 2:
        raise ValueError(f"synth_blobs: need >= 2 samples per class, got {per_class}")
    if dim < num_classes:
        raise ValueError(f"synth_blobs: dim {dim} < num_classes {num_classes}")
    if spread < 0:
        raise ValueError(f"synth_blobs: spread must be >= 0, got {spread}")
    rng = Rng(seed)
    centers = _simplex_centers(num_classes, dim)
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    feats = centers[labels] + spread * rng.normal(size=(n, dim))
    order = rng.permutation(n)
    cut = (n * 8) // 10
    tr, te = order[:cut], order[cut:]
    train = Dataset(feats[tr], labels[tr], num_classes, "train")
    test = Dataset(feats[te], labels[te], num_classes, "test")
    return train, test


def subset(ds, k, seed):
    """Seeded class-stratified sample of size k.

    Falls back to a plain seeded sample (setting `warning`) when the
    stratified share of some class exceeds that class's population.
    """
    if not 1 <= k <= ds.size:
        raise ValueError(f"subset: k={k} outside [1, {ds.size}]")
    rng = Rng(seed)
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    base, extra = divmod(k, ds.num_classes)
    want = np.full(ds.num_classes, base)
    want[:extra] += 1
    warning = None
    if np.any(want > counts):
        warning = "stratification infeasible for some class; plain sampling used"
        idx = rng.permutation(ds.size)[:k]
    else:
        picks = []
        for c in range(ds.num_classes):
            members = np.nonzero(ds.labels == c)[0]
            order = rng.permutation(members.size)
            picks.append(members[order[: want[c]]])
        idx = np.concatenate(picks)
        idx = idx[rng.permutation(idx.size)]
    return Dataset(ds.features[idx], ds.labels[idx], ds.num_classes, ds.split,
                   image=ds.image, warning=warning)
