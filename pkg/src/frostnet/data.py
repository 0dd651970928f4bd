"""Dataset ingestion: CIFAR-10 binary batches, a seeded synthetic
fallback, normalization, augmentation, and deterministic batching.

CIFAR-10 binary format: per record 1 label byte + 3072 pixel bytes in
CHW order; 10000 records per file (30,730,000 bytes). When no dataset
directory is available, a seeded 10-class synthetic image generator with
the same shape contract keeps every pipeline hermetic.
"""

import os
from dataclasses import dataclass

import numpy as np

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], np.float32)

RECORD_BYTES = 1 + 3072
FILE_RECORDS = 10000
FILE_BYTES = RECORD_BYTES * FILE_RECORDS
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"
DATA_ROOT_ENV = "FROSTNET_DATA_ROOT"

CLASS_NAMES = ["airplane", "automobile", "bird", "cat", "deer",
               "dog", "frog", "horse", "ship", "truck"]


@dataclass
class ImageDataset:
    """uint8 images [N, 3, H, W] with integer labels [N]."""

    images: np.ndarray
    labels: np.ndarray
    source: str

    def __len__(self):
        return len(self.labels)

    def subset(self, n, seed=0):
        """Deterministic class-balanced-ish subset of the first n samples
        after a seeded shuffle."""
        idx = np.random.default_rng(seed).permutation(len(self))[:n]
        return ImageDataset(self.images[idx], self.labels[idx],
                            f"{self.source}[{n}]")


def _read_batch_file(path):
    size = os.path.getsize(path)
    if size != FILE_BYTES:
        raise ValueError(
            f"{path}: expected {FILE_BYTES} bytes "
            f"({FILE_RECORDS} records of {RECORD_BYTES}), found {size}")
    raw = np.fromfile(path, dtype=np.uint8).reshape(FILE_RECORDS, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(FILE_RECORDS, 3, 32, 32)
    return images, labels


def load_cifar10(root):
    """Load the standard binary batches from ``root``; returns train/test."""
    train_imgs, train_labels = [], []
    for name in TRAIN_FILES:
        path = os.path.join(root, name)
        if not os.path.exists(path):
            raise FileNotFoundError(
                f"missing CIFAR-10 batch file {path}; download the binary "
                "version (cifar-10-binary.tar.gz) from the dataset's "
                "distribution page and unpack it there, or set "
                f"${DATA_ROOT_ENV} to the directory holding the .bin files")
        imgs, labels = _read_batch_file(path)
        train_imgs.append(imgs)
        train_labels.append(labels)
    test_imgs, test_labels = _read_batch_file(os.path.join(root, TEST_FILE))
    train = ImageDataset(np.concatenate(train_imgs), np.concatenate(train_labels),
                         "cifar10:train")
    test = ImageDataset(test_imgs, test_labels, "cifar10:test")
    return train, test


def synthetic_dataset(n_train=50000, n_test=10000, num_classes=10, seed=7,
                      res=32):
    """Seeded learnable 10-class image set with the CIFAR shape contract.

    Each class is a mixture of oriented gratings drawn from a frequency
    pool shared across classes, so classes overlap in structure; samples
    take random crops, flips, contrast/color jitter, an uninformative
    distractor grating, and pixel noise. Tuned so a small convnet reaches
    roughly CIFAR-like (not saturated) accuracy.
    """
    rng = np.random.default_rng(seed)
    canvas = res + 16
    yy, xx = np.meshgrid(np.arange(canvas), np.arange(canvas), indexing="ij")

    def grating(f, phase):
        return np.cos(2 * np.pi * (f[0] * xx + f[1] * yy) + phase).astype(np.float32)

    # a common component pool; each class mixes a few shared components,
    # so single frequencies are not class-diagnostic
    pool = [grating(rng.uniform(0.05, 0.30, 2), rng.uniform(0, 2 * np.pi))
            for _ in range(12)]
    templates = np.empty((num_classes, 3, canvas, canvas), np.float32)
    for c in range(num_classes):
        t = np.zeros((3, canvas, canvas), np.float32)
        picks = rng.choice(len(pool), size=4, replace=False)
        for p in picks:
            weights = rng.uniform(-1, 1, 3).astype(np.float32)
            t += weights.reshape(3, 1, 1) * pool[p]
        t /= max(np.abs(t).max(), 1e-6)
        color = rng.uniform(-0.15, 0.15, 3).astype(np.float32)
        templates[c] = 0.5 + 0.28 * t + color.reshape(3, 1, 1)

    distractors = np.stack(
        [grating(rng.uniform(0.05, 0.35, 2), rng.uniform(0, 2 * np.pi))
         for _ in range(16)])

    def render(n, r):
        labels = r.integers(0, num_classes, n).astype(np.int64)
        out = np.empty((n, 3, res, res), np.uint8)
        offs = r.integers(0, canvas - res + 1, (n, 2))
        contrast = r.uniform(0.55, 1.45, n).astype(np.float32)
        flips = r.random(n) < 0.5
        dpick = r.integers(0, len(distractors), n)
        dweight = r.uniform(0.15, 0.45, n).astype(np.float32)
        for i in range(n):
            oy, ox = offs[i]
            img = templates[labels[i], :, oy:oy + res, ox:ox + res]
            img = 0.5 + (img - 0.5) * contrast[i]
            img = img + dweight[i] * distractors[dpick[i], oy:oy + res, ox:ox + res]
            if flips[i]:
                img = img[:, :, ::-1]
            img = img + r.normal(0.0, 0.22, img.shape).astype(np.float32)
            img = img + r.uniform(-0.1, 0.1, (3, 1, 1)).astype(np.float32)
            out[i] = (np.clip(img, 0, 1) * 255).astype(np.uint8)
        return out, labels

    train_imgs, train_labels = render(n_train, np.random.default_rng(seed + 1))
    test_imgs, test_labels = render(n_test, np.random.default_rng(seed + 2))
    return (ImageDataset(train_imgs, train_labels, "synthetic:train"),
            ImageDataset(test_imgs, test_labels, "synthetic:test"))


def resolve_dataset(root=None, n_train=50000, n_test=10000, seed=7):
    """CIFAR-10 from disk when present, otherwise the synthetic fallback."""
    root = root or os.environ.get(DATA_ROOT_ENV)
    if root and os.path.exists(os.path.join(root, TRAIN_FILES[0])):
        return load_cifar10(root)
    return synthetic_dataset(n_train=n_train, n_test=n_test, seed=seed)


def normalize(images_u8):
    """uint8 [N,3,H,W] -> normalized float32."""
    x = images_u8.astype(np.float32)
    x /= 255.0
    x -= CIFAR_MEAN.reshape(1, 3, 1, 1)
    x /= CIFAR_STD.reshape(1, 3, 1, 1)
    return x


def augment(images_u8, rng, pad=4):
    """Random crop with reflection-free zero padding plus horizontal flip."""
    n, c, h, w = images_u8.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), images_u8.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = images_u8
    out = np.empty_like(images_u8)
    offs = rng.integers(0, 2 * pad + 1, (n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        oy, ox = offs[i]
        crop = padded[i, :, oy:oy + h, ox:ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def epoch_batches(dataset, batch_size, epoch, seed, train=True, augment_data=None):
    """Deterministic epoch iterator yielding (x_norm, labels).

    Training epochs shuffle and augment with an RNG derived from
    (seed, epoch); evaluation iterates in order without augmentation.
    Trailing samples that do not fill a batch are dropped in training.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset split")
    if train:
        entropy = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
        rng = np.random.default_rng(np.random.SeedSequence(entropy + (epoch,)))
        order = rng.permutation(n)
        limit = (n // batch_size) * batch_size
        if limit == 0:
            raise ValueError(f"dataset smaller than one batch ({n} < {batch_size})")
        do_augment = augment_data if augment_data is not None else True
        for i in range(0, limit, batch_size):
            idx = order[i:i + batch_size]
            imgs = dataset.images[idx]
            if do_augment:
                imgs = augment(imgs, rng)
            yield normalize(imgs), dataset.labels[idx]
    else:
        for i in range(0, n, batch_size):
            yield (normalize(dataset.images[i:i + batch_size]),
                   dataset.labels[i:i + batch_size])
