"""Dataset ingestion, evaluation protocols and normalization.

Supported inputs are MNIST IDX files (optionally gzipped), CIFAR-10 binary
batches and 8-bit binary PGM (P5) video frames.
"""

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class RawDataset:
    images: np.ndarray  # (N, C, H, W) uint8
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)


def _read_bytes(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(path):
    """Read an unsigned-byte IDX file into a numpy array.

    The header is the big-endian magic (``2051`` for image files, ``2049``
    for label files) followed by one big-endian int32 per dimension.
    """
    data = _read_bytes(path)
    if len(data) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    magic, = struct.unpack(">i", data[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"{path}: bad IDX magic {magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}i", data[4:header])
    expected = int(np.prod(dims))
    if len(data) - header < expected:
        raise FormatError(f"{path}: truncated payload, expected {expected} bytes, got {len(data) - header}")
    if len(data) - header > expected:
        raise FormatError(f"{path}: {len(data) - header - expected} trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, count=expected, offset=header).reshape(dims).copy()


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim not in (1, 3):
        raise ValueError("IDX writer supports label vectors and image stacks only")
    magic = IDX_LABELS_MAGIC if array.ndim == 1 else IDX_IMAGES_MAGIC
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(struct.pack(">i", magic))
        f.write(struct.pack(f">{array.ndim}i", *array.shape))
        f.write(array.tobytes())


def load_mnist(images_path, labels_path):
    images = parse_idx(images_path)
    labels = parse_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError("expected a 3-d image file and a 1-d label file")
    return RawDataset(images[:, None], labels.astype(np.int64))


def parse_cifar(path):
    """One CIFAR-10 binary batch: records of a label byte then 3x32x32 channel-planar pixels."""
    data = _read_bytes(path)
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        raise FormatError(f"{path}: length {len(data)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(f"{path}: record {bad[0]} has label {labels[bad[0]]}, expected 0-9")
    return RawDataset(rec[:, 1:].reshape(-1, 3, 32, 32).copy(), labels)


def write_cifar(path, raw):
    rec = np.concatenate([np.asarray(raw.labels, np.uint8)[:, None],
                          np.asarray(raw.images, np.uint8).reshape(len(raw), -1)], axis=1)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


def load_cifar(paths):
    parts = [parse_cifar(p) for p in paths]
    return RawDataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


def parse_pgm(path):
    """An 8-bit binary (P5) PGM frame as an (H, W) uint8 array."""
    data = _read_bytes(path)
    if data[:2] != b"P5":
        kind = data[:2].decode("ascii", "replace")
        raise FormatError(f"{path}: unsupported PGM variant {kind!r}, only binary P5 is read")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError(f"{path}: truncated PGM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise FormatError(f"{path}: bad PGM header field {data[start:pos]!r}") from None
    width, height, maxval = fields
    if not 0 < maxval <= 255:
        raise FormatError(f"{path}: maxval {maxval} not supported (must be 1-255)")
    pos += 1  # single whitespace byte before the raster
    need = width * height
    if len(data) - pos < need:
        raise FormatError(f"{path}: truncated raster, expected {need} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()


def write_pgm(path, frame):
    frame = np.asarray(frame, dtype=np.uint8)
    h, w = frame.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(frame.tobytes())


def normalize(raw):
    """8-bit intensities to float32 in [-1, 1]; 127.5 maps to 0."""
    return (np.asarray(raw, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def pad_images(x, size, value=-1.0, mode="constant"):
    """Centre-pad (N, C, H, W) images to ``size`` x ``size``."""
    h, w = x.shape[-2:]
    if h > size or w > size:
        raise ValueError(f"images {h}x{w} larger than {size}")
    top, left = (size - h) // 2, (size - w) // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(top, size - h - top), (left, size - w - left)]
    if mode == "constant":
        return np.pad(x, pad, constant_values=value)
    return np.pad(x, pad, mode=mode)


def prepare_mnist(images_u8, size=32):
    """Normalize MNIST digits and pad them to ``size`` with background value -1."""
    x = normalize(images_u8)
    if x.ndim == 3:
        x = x[:, None]
    return pad_images(x, size, -1.0)


def extract_patches(frame, size=30, stride=None):
    """Cut a frame into a row-major grid of square patches."""
    stride = stride or size
    h, w = frame.shape[-2:]
    if (h - size) % stride or (w - size) % stride or h < size or w < size:
        raise ValueError(f"frame {h}x{w} cannot be tiled by {size}-pixel patches with stride {stride}")
    rows = (h - size) // stride + 1
    cols = (w - size) // stride + 1
    return np.stack([frame[..., r * stride:r * stride + size, c * stride:c * stride + size]
                     for r in range(rows) for c in range(cols)])


def reassemble_patches(patches, frame_shape):
    """Inverse of non-overlapping :func:`extract_patches`."""
    size = patches.shape[-1]
    h, w = frame_shape
    cols = w // size
    out = np.empty((h, w), dtype=patches.dtype)
    for i, p in enumerate(patches):
        r, c = divmod(i, cols)
        out[r * size:(r + 1) * size, c * size:(c + 1) * size] = p
    return out


def _hash_indices(idx):
    return hashlib.sha256(np.asarray(idx, dtype=np.int64).tobytes()).hexdigest()[:16]


@dataclass
class DatasetSplit:
    """Normalized splits for one inlier class.

    ``train`` is the protocol training set (inliers only).  Validation
    inliers are rows of ``train`` (``val_rows``) and are left out of
    ``fit``, the part actually used for optimization.
    """

    train: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    val_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    test_raw: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @property
    def fit(self):
        if len(self.val_rows) == 0:
            return self.train
        keep = np.ones(len(self.train), bool)
        keep[self.val_rows] = False
        return self.train[keep]

    def write_metadata(self, path):
        with open(path, "w") as f:
            for k, v in self.meta.items():
                f.write(f"{k} = {v}\n")


def read_metadata(path):
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def build_mnist_protocol(raw, inlier_class, seed=0, val_fraction=0.05, size=32):
    """One-class MNIST split: inliers 2:1 train/test, outliers 30 % of the test set.

    Outliers are drawn without replacement from the other nine classes; a
    disjoint set of them, equal in size to the validation inliers, forms the
    validation outliers.
    """
    labels = np.asarray(raw.labels)
    if not 0 <= inlier_class <= 9:
        raise ConfigError(f"inlier class must be 0-9, got {inlier_class}")
    inliers = np.nonzero(labels == inlier_class)[0]
    if inliers.size == 0:
        raise ConfigError(f"class {inlier_class} absent from the dataset")
    rng = np.random.default_rng(seed)
    inliers = rng.permutation(inliers)
    n_train = int(round(inliers.size * 2 / 3))
    train_idx, test_in = inliers[:n_train], inliers[n_train:]
    n_out = int(round(test_in.size * 3 / 7))
    n_val = int(round(val_fraction * n_train))
    pool = rng.permutation(np.nonzero(labels != inlier_class)[0])
    if pool.size < n_out + n_val:
        raise ConfigError("not enough outliers for the protocol")
    test_out = pool[:n_out]
    val_out = pool[n_out:n_out + n_val]
    val_rows = np.arange(n_train - n_val, n_train)

    images = raw.images[:, 0] if raw.images.ndim == 4 else raw.images
    train = prepare_mnist(images[train_idx], size)
    test_idx = np.r_[test_in, test_out]
    val_x = np.concatenate([train[val_rows], prepare_mnist(images[val_out], size)])
    split = DatasetSplit(
        train=train,
        val_x=val_x,
        val_y=np.r_[np.zeros(n_val, int), np.ones(n_val, int)],
        test_x=prepare_mnist(images[test_idx], size),
        test_y=np.r_[np.zeros(test_in.size, int), np.ones(n_out, int)],
        val_rows=val_rows,
        test_raw=images[test_idx],
    )
    split.meta = {
        "protocol": "mnist", "inlier_class": inlier_class, "seed": seed,
        "n_train": n_train, "n_fit": n_train - n_val, "n_val_inlier": n_val, "n_val_outlier": n_val,
        "n_test_inlier": test_in.size, "n_test_outlier": n_out,
        "hash_train": _hash_indices(train_idx), "hash_test": _hash_indices(test_idx),
        "hash_val_outlier": _hash_indices(val_out),
    }
    return split


def build_cifar_protocol(train_raw, test_raw, inlier_class, seed=0, val_fraction=0.05):
    """One-class CIFAR-10 split on the predefined train/test partitions.

    Training uses the class's predefined training images; the full
    predefined test set is used for testing with every other class as
    outlier.  Validation outliers come from other classes' training images.
    """
    if not 0 <= inlier_class <= 9:
        raise ConfigError(f"inlier class must be 0-9, got {inlier_class}")
    tr_labels = np.asarray(train_raw.labels)
    train_idx = np.nonzero(tr_labels == inlier_class)[0]
    if train_idx.size == 0:
        raise ConfigError(f"class {inlier_class} absent from the training batches")
    rng = np.random.default_rng(seed)
    n_train = train_idx.size
    n_val = int(round(val_fraction * n_train))
    val_rows = np.sort(rng.choice(n_train, n_val, replace=False))
    val_out = rng.choice(np.nonzero(tr_labels != inlier_class)[0], n_val, replace=False)
    train = normalize(train_raw.images[train_idx])
    test_y = (np.asarray(test_raw.labels) != inlier_class).astype(int)
    split = DatasetSplit(
        train=train,
        val_x=np.concatenate([train[val_rows], normalize(train_raw.images[val_out])]),
        val_y=np.r_[np.zeros(n_val, int), np.ones(n_val, int)],
        test_x=normalize(test_raw.images),
        test_y=test_y,
        val_rows=val_rows,
    )
    split.meta = {
        "protocol": "cifar", "inlier_class": inlier_class, "seed": seed,
        "n_train": n_train, "n_fit": n_train - n_val, "n_val_inlier": n_val, "n_val_outlier": n_val,
        "n_test_inlier": int((test_y == 0).sum()), "n_test_outlier": int(test_y.sum()),
        "hash_train": _hash_indices(train_idx), "hash_val_outlier": _hash_indices(val_out),
    }
    return split


@dataclass
class VideoSplit:
    """Patch-level training data and frame-level test data for a video dataset."""

    train: np.ndarray        # (P, 1, S, S) normalized patches
    test_x: np.ndarray       # (F * patches_per_frame, 1, S, S)
    test_y: np.ndarray       # (F,) frame labels
    patches_per_frame: int
    meta: dict = field(default_factory=dict)

    @property
    def fit(self):
        return self.train


def frames_to_patches(frames, size=30, pad_to=32):
    """Normalized, edge-padded patches of every frame, frame-major then row-major."""
    patches = np.concatenate([extract_patches(f, size) for f in frames])
    x = normalize(patches)[:, None]
    return pad_images(x, pad_to, mode="edge") if pad_to != size else x


def build_ucsd_protocol(train_frames, test_frames, test_labels, size=30, pad_to=32):
    test_labels = np.asarray(test_labels).astype(int)
    if len(test_frames) != len(test_labels):
        raise FormatError("one label per test frame is required")
    if len(train_frames) == 0 or len(test_frames) == 0:
        raise ConfigError("empty frame list")
    per_frame = len(extract_patches(test_frames[0], size))
    split = VideoSplit(
        train=frames_to_patches(train_frames, size, pad_to),
        test_x=frames_to_patches(test_frames, size, pad_to),
        test_y=test_labels,
        patches_per_frame=per_frame,
    )
    split.meta = {
        "protocol": "ucsd", "n_train_frames": len(train_frames), "n_test_frames": len(test_frames),
        "patches_per_frame": per_frame, "n_test_outlier_frames": int(test_labels.sum()),
    }
    return split


def load_frame_dir(directory):
    """All ``*.pgm`` frames of a directory in filename order."""
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".pgm"))
    if not names:
        raise FormatError(f"{directory}: no .pgm frames")
    return names, [parse_pgm(os.path.join(directory, n)) for n in names]


def read_frame_labels(path, names):
    """Frame labels from a ``frame,label`` CSV, ordered like ``names``."""
    table = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("frame"):
                continue
            name, lab = line.split(",")
            table[name.strip()] = int(lab)
    missing = [n for n in names if n not in table]
    if missing:
        raise FormatError(f"{path}: no label for frame {missing[0]}")
    return np.array([table[n] for n in names])
