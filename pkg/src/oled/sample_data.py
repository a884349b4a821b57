"""Sample data in the on-disk formats the loaders read.

The full MNIST distribution is not bundled.  ``mlxtend`` ships 5000 MNIST
training digits (500 per class) which are enough for desk-scale runs; this
module writes them out in the standard IDX layout so that every pipeline
goes through the regular file parsers.

CIFAR-10 and UCSD Ped are not available offline, so synthetic stand-ins are
written in their real formats (binary batches, PGM frames plus a label CSV).
They exercise the pipelines, not the detector.
"""

import os

import numpy as np

from .datasets import RawDataset, write_cifar, write_idx, write_pgm

IMAGES_NAME = "mnist5k-images-idx3-ubyte"
LABELS_NAME = "mnist5k-labels-idx1-ubyte"


def write_mnist_subset(directory):
    """Write the 5000-digit sample as IDX files; returns ``(images_path, labels_path)``."""
    images_path = os.path.join(directory, IMAGES_NAME)
    labels_path = os.path.join(directory, LABELS_NAME)
    if os.path.exists(images_path) and os.path.exists(labels_path):
        return images_path, labels_path
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise RuntimeError("the MNIST sample needs the optional 'mlxtend' package") from exc
    X, y = mnist_data()
    os.makedirs(directory, exist_ok=True)
    write_idx(images_path, np.asarray(X, dtype=np.uint8).reshape(-1, 28, 28))
    write_idx(labels_path, np.asarray(y, dtype=np.uint8))
    return images_path, labels_path


def write_synthetic_cifar(path, per_class, seed=0):
    """A CIFAR-10 binary batch with ``per_class`` noise images of every label."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(10, dtype=np.uint8), per_class)
    images = rng.integers(0, 256, (labels.size, 3, 32, 32), dtype=np.uint8)
    write_cifar(path, RawDataset(images, labels))
    return path


def synthetic_frames(n, anomalous=(), shape=(240, 360), seed=0):
    """Street-like frames: textured background and slow dark walkers.

    Frames whose index is in ``anomalous`` also carry a fast bright block,
    a stand-in for a cart or cyclist.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[:h, :w]
    background = 140 + 20 * np.sin(xx / 23.0) * np.cos(yy / 31.0)
    starts = rng.uniform(0, w, size=6)
    lanes = rng.uniform(20, h - 40, size=6)
    frames = []
    for i in range(n):
        f = background + rng.normal(0, 4, shape)
        for x0, y0 in zip(starts, lanes):
            x = int(x0 + 0.8 * i) % (w - 12)
            f[int(y0):int(y0) + 24, x:x + 10] = 60
        if i in anomalous:
            x = int(7 * i) % (w - 40)
            f[100:140, x:x + 40] = 250
        frames.append(np.clip(np.rint(f), 0, 255).astype(np.uint8))
    return frames


def write_synthetic_ucsd(directory, n_train=100, n_test=100, seed=0):
    """Write ``train/`` and ``test/`` PGM frames and ``test_labels.csv``.

    The middle third of the test frames is anomalous.  Returns
    ``(train_dir, test_dir, labels_path)``.
    """
    train_dir = os.path.join(directory, "train")
    test_dir = os.path.join(directory, "test")
    os.makedirs(train_dir, exist_ok=True)
    os.makedirs(test_dir, exist_ok=True)
    for i, f in enumerate(synthetic_frames(n_train, seed=seed)):
        write_pgm(os.path.join(train_dir, f"{i:03d}.pgm"), f)
    bad = set(range(n_test // 3, 2 * n_test // 3))
    labels_path = os.path.join(directory, "test_labels.csv")
    with open(labels_path, "w") as lab:
        lab.write("frame,label\n")
        for i, f in enumerate(synthetic_frames(n_test, bad, seed=seed + 1)):
            name = f"{i:03d}.pgm"
            write_pgm(os.path.join(test_dir, name), f)
            lab.write(f"{name},{int(i in bad)}\n")
    return train_dir, test_dir, labels_path
