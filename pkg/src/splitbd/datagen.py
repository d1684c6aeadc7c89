"""Generator for the bundled `digits28` dataset.

The lab needs an MNIST-shaped corpus (10 classes, 28x28 grayscale) that can be
materialized offline. We start from scikit-learn's packaged handwritten-digit
images (1797 8x8 samples), upsample each to 32x32, and stamp out augmented
28x28 variants: random crop offset, brightness jitter, pixel noise, and a mild
box blur to soften the upsampling blocks. Base images are split disjointly per
class between the train and test pools, so no test sample is an augmentation
of a train-side original.

Files are written in the classic IDX layout under <root>/digits28/ using the
same file names as MNIST, which lets every loader path in splitbd.data treat
digits28 exactly like a real download.
"""

import os

import numpy as np
from sklearn.datasets import load_digits

from .data import write_idx_images, write_idx_labels

TRAIN_COUNT = 11000
TEST_COUNT = 10000


def _box_blur(img):
    # 3x3 mean filter with edge padding; cheap enough to run per-sample.
    p = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            out += p[dr : dr + img.shape[0], dc : dc + img.shape[1]]
    return out / 9.0


def _augment(base8, rng):
    a = np.kron(base8 / 16.0, np.ones((4, 4)))  # 8x8 -> 32x32
    r0, c0 = rng.integers(0, 5, size=2)
    a = a[r0 : r0 + 28, c0 : c0 + 28]
    a = a * rng.uniform(0.75, 1.0) + rng.normal(0.0, 0.06, size=a.shape)
    a = _box_blur(a)
    return (np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def _render(pool_by_class, per_class, rng):
    images, labels = [], []
    for c in range(10):
        pool = pool_by_class[c]
        for _ in range(per_class):
            images.append(_augment(pool[rng.integers(len(pool))], rng))
            labels.append(c)
    images = np.stack(images)
    labels = np.array(labels, dtype=np.uint8)
    order = rng.permutation(len(labels))
    return images[order], labels[order]


def generate_digits28(root, train_count=TRAIN_COUNT, test_count=TEST_COUNT, seed=7):
    """Write the digits28 train/test IDX files under <root>/digits28/."""
    if train_count % 10 or test_count % 10:
        raise ValueError("train_count and test_count must be multiples of 10")
    digits = load_digits()
    rng = np.random.default_rng(seed)

    train_pools, test_pools = {}, {}
    for c in range(10):
        base = digits.images[digits.target == c]
        idx = rng.permutation(len(base))
        n_test = len(base) // 3
        test_pools[c] = base[idx[:n_test]]
        train_pools[c] = base[idx[n_test:]]

    out = os.path.join(root, "digits28")
    os.makedirs(out, exist_ok=True)
    tr_img, tr_lab = _render(train_pools, train_count // 10, rng)
    te_img, te_lab = _render(test_pools, test_count // 10, rng)
    write_idx_images(os.path.join(out, "train-images-idx3-ubyte"), tr_img)
    write_idx_labels(os.path.join(out, "train-labels-idx1-ubyte"), tr_lab)
    write_idx_images(os.path.join(out, "t10k-images-idx3-ubyte"), te_img)
    write_idx_labels(os.path.join(out, "t10k-labels-idx1-ubyte"), te_lab)
    return out
