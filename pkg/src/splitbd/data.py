"""Dataset loading and input transforms.

All images travel through the package as float32 arrays shaped [N, C, H, W]
with values in [0, 1]; labels are int64 class ids. Loaders read the on-disk
binary formats directly (IDX for the MNIST family, the record format for
CIFAR-10) so there is no dependency on a download step: point `root` at a
directory that already contains the files.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, IngestionError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CORNERS = ("br", "bl", "tr", "tl")


@dataclass
class ImageBatch:
    """A batch of images plus labels."""

    pixels: np.ndarray  # float32 [N, C, H, W], values in [0, 1]
    labels: np.ndarray  # int64 [N]

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise DimensionError(f"pixels must be [N, C, H, W], got shape {self.pixels.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.pixels):
            raise DimensionError(
                f"labels must be [N] with N={len(self.pixels)}, got shape {self.labels.shape}"
            )
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.pixels)

    @property
    def image_shape(self):
        return tuple(self.pixels.shape[1:])

    def subset(self, indices):
        return ImageBatch(self.pixels[indices], self.labels[indices])


@dataclass
class DatasetSplit:
    """Train/auxiliary/test partition of one dataset.

    `aux` is carved out of the training pool (class-balanced, disjoint from
    `train`); it plays the role of the attacker-visible unlabeled sample.
    """

    train: ImageBatch
    aux: ImageBatch
    test: ImageBatch
    name: str
    num_classes: int


@dataclass(frozen=True)
class TriggerSpec:
    """A solid square stamped into one corner of the image."""

    size: int = 4
    corner: str = "br"
    margin: int = 0
    value: float = 1.0

    def __post_init__(self):
        if self.size < 1:
            raise DimensionError(f"trigger size must be >= 1, got {self.size}")
        if self.corner not in CORNERS:
            raise DimensionError(f"corner must be one of {CORNERS}, got {self.corner!r}")
        if self.margin < 0:
            raise DimensionError(f"margin must be >= 0, got {self.margin}")


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian pixel noise, clipped back into [0, 1]."""

    sigma: float
    seed: int = 0


def _read_exact(f, n, path, what):
    data = f.read(n)
    if len(data) != n:
        raise IngestionError(f"{path}: truncated while reading {what} ({len(data)}/{n} bytes)")
    return data


def read_idx_images(path):
    """Read an IDX3 image file into a uint8 array [N, H, W]."""
    if not os.path.exists(path):
        raise IngestionError(f"missing dataset file: {path}")
    with open(path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, path, "header"))
        if magic != IDX_IMAGE_MAGIC:
            raise IngestionError(f"{path}: bad image magic 0x{magic:08x}")
        raw = _read_exact(f, count * rows * cols, path, "pixel data")
        if f.read(1):
            raise IngestionError(f"{path}: trailing bytes after pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path):
    if not os.path.exists(path):
        raise IngestionError(f"missing dataset file: {path}")
    with open(path, "rb") as f:
        magic, count = struct.unpack(">II", _read_exact(f, 8, path, "header"))
        if magic != IDX_LABEL_MAGIC:
            raise IngestionError(f"{path}: bad label magic 0x{magic:08x}")
        raw = _read_exact(f, count, path, "label data")
        if f.read(1):
            raise IngestionError(f"{path}: trailing bytes after label data")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def write_idx_images(path, images):
    """Write a uint8 array [N, H, W] in IDX3 layout (big-endian header)."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def _load_idx_pair(image_path, label_path):
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if len(images) != len(labels):
        raise IngestionError(
            f"image/label count mismatch: {len(images)} images vs {len(labels)} labels "
            f"({image_path}, {label_path})"
        )
    pixels = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return ImageBatch(pixels, labels)


def _load_mnist_style(root, subdir):
    d = os.path.join(root, subdir)
    train = _load_idx_pair(
        os.path.join(d, "train-images-idx3-ubyte"), os.path.join(d, "train-labels-idx1-ubyte")
    )
    test = _load_idx_pair(
        os.path.join(d, "t10k-images-idx3-ubyte"), os.path.join(d, "t10k-labels-idx1-ubyte")
    )
    return train, test


CIFAR_RECORD = 1 + 3 * 1024


def _read_cifar_file(path):
    if not os.path.exists(path):
        raise IngestionError(f"missing dataset file: {path}")
    raw = open(path, "rb").read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
        raise IngestionError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise IngestionError(f"{path}: label byte out of range 0..9")
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return pixels, labels


def _load_cifar10(root):
    d = os.path.join(root, "cifar10")
    parts = [_read_cifar_file(os.path.join(d, f"data_batch_{i}.bin")) for i in range(1, 6)]
    train = ImageBatch(
        np.concatenate([p for p, _ in parts]), np.concatenate([l for _, l in parts])
    )
    tp, tl = _read_cifar_file(os.path.join(d, "test_batch.bin"))
    return train, ImageBatch(tp, tl)


# name -> (loader, num_classes). "digits28" is the bundled synthetic stand-in
# written in the same IDX layout as MNIST (see splitbd.datagen).
_DATASETS = {
    "mnist": (lambda root: _load_mnist_style(root, "mnist"), 10),
    "fmnist": (lambda root: _load_mnist_style(root, "fmnist"), 10),
    "digits28": (lambda root: _load_mnist_style(root, "digits28"), 10),
    "cifar10": (_load_cifar10, 10),
}


def dataset_names():
    return sorted(_DATASETS)


def num_classes_for(name):
    if name not in _DATASETS:
        raise IngestionError(f"unknown dataset {name!r}; known: {dataset_names()}")
    return _DATASETS[name][1]


def carve_aux(train, num_classes, aux_count, seed):
    """Split a class-balanced auxiliary set off the training pool.

    Picks aux_count/num_classes samples per class (aux_count must divide
    evenly) using a seeded shuffle, and returns (remaining_train, aux) with
    the remaining samples kept in their original order.
    """
    if aux_count == 0:
        empty = ImageBatch(
            np.zeros((0,) + train.image_shape, dtype=np.float32), np.zeros(0, dtype=np.int64)
        )
        return train, empty
    if aux_count % num_classes != 0:
        raise IngestionError(
            f"aux_count {aux_count} does not divide evenly over {num_classes} classes"
        )
    per_class = aux_count // num_classes
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(num_classes):
        idx = np.flatnonzero(train.labels == c)
        if len(idx) < per_class:
            raise IngestionError(
                f"class {c} has only {len(idx)} training samples, need {per_class} for aux"
            )
        chosen.append(rng.permutation(idx)[:per_class])
    chosen = np.sort(np.concatenate(chosen))
    mask = np.ones(len(train), dtype=bool)
    mask[chosen] = False
    return train.subset(np.flatnonzero(mask)), train.subset(chosen)


def load_dataset(name, root, aux_count=None, aux_fraction=0.1, seed=0):
    """Load one registered dataset and carve its auxiliary split.

    aux_count takes precedence when given; otherwise the auxiliary size is
    round(aux_fraction * len(train)) rounded down to a per-class-even total.
    aux_fraction=0 (with aux_count unset) yields an empty auxiliary set.
    """
    if name not in _DATASETS:
        raise IngestionError(f"unknown dataset {name!r}; known: {dataset_names()}")
    loader, num_classes = _DATASETS[name]
    train_full, test = loader(root)
    if aux_count is None:
        want = int(round(aux_fraction * len(train_full)))
        aux_count = (want // num_classes) * num_classes
    train, aux = carve_aux(train_full, num_classes, aux_count, seed)
    return DatasetSplit(train=train, aux=aux, test=test, name=name, num_classes=num_classes)


def _patch_slices(spec, height, width):
    if spec.size + spec.margin > height or spec.size + spec.margin > width:
        raise DimensionError(
            f"trigger {spec.size}px with margin {spec.margin} does not fit in {height}x{width}"
        )
    lo = spec.margin
    hi_r = height - spec.margin
    hi_c = width - spec.margin
    rows = slice(lo, lo + spec.size) if spec.corner in ("tl", "tr") else slice(hi_r - spec.size, hi_r)
    cols = slice(lo, lo + spec.size) if spec.corner in ("tl", "bl") else slice(hi_c - spec.size, hi_c)
    return rows, cols


def apply_trigger_patch(batch, spec):
    """Stamp the trigger square into every image; returns a new batch."""
    _, h, w = batch.image_shape
    rows, cols = _patch_slices(spec, h, w)
    pixels = batch.pixels.copy()
    pixels[:, :, rows, cols] = spec.value
    return ImageBatch(pixels, batch.labels.copy())


def apply_gaussian_noise(batch, spec):
    """Add seeded N(0, sigma^2) noise per pixel and clip to [0, 1]."""
    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(0.0, spec.sigma, size=batch.pixels.shape).astype(np.float32)
    pixels = np.clip(batch.pixels + noise, 0.0, 1.0)
    return ImageBatch(pixels, batch.labels.copy())
