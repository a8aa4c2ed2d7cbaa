"""Datasets: synthetic generators and binary image-format readers.

Every dataset exposes features in ``[0, 1]`` so L-inf attacks can clip to
the unit box.
"""

import gzip
import io
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.datasets import make_blobs, make_moons

from .exceptions import DataFormatError, InvalidInputError

SYNTH_RANGE = (0.05, 0.95)
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32
CACHE_VERSION = 1


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"
    image_shape: tuple = None

    def __post_init__(self):
        X = np.asarray(self.features)
        y = np.asarray(self.labels)
        if len(X) == 0:
            raise InvalidInputError("dataset is empty")
        if len(X) != len(y):
            raise InvalidInputError(f"{len(X)} feature rows but {len(y)} labels")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise InvalidInputError(f"labels must lie in [0, {self.n_classes})")
        if X.min() < 0 or X.max() > 1:
            raise InvalidInputError("features must lie in [0, 1]")
        if self.split not in ("train", "test"):
            raise InvalidInputError(f"unknown split {self.split!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, k):
        """First ``k`` examples."""
        if k is None or k >= len(self):
            return self
        return Dataset(self.features[:k], self.labels[:k], self.n_classes, self.split, self.image_shape)

    def equals(self, other):
        return (self.n_classes == other.n_classes and self.split == other.split
                and self.features.dtype == other.features.dtype
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


def _scale_columns(X, lo, hi):
    mn = X.min(axis=0)
    span = X.max(axis=0) - mn
    span[span == 0] = 1.0
    return lo + (X - mn) / span * (hi - lo)


def gen_two_moons(n, noise=0.1, seed=0, split="train"):
    """Two interleaved half-circles, scaled into ``[0.05, 0.95]^2``."""
    if n < 2:
        raise InvalidInputError("need n >= 2")
    X, y = make_moons(n_samples=n, noise=noise, random_state=seed)
    return Dataset(_scale_columns(X, *SYNTH_RANGE), y.astype(np.int64), 2, split)


def gen_blobs(n, n_classes=3, spread=1.0, seed=0, n_features=2, split="train"):
    """Isotropic Gaussian blobs, one per class, scaled into ``[0.05, 0.95]``."""
    if n < n_classes:
        raise InvalidInputError("need n >= n_classes")
    X, y = make_blobs(n_samples=n, centers=n_classes, n_features=n_features,
                      cluster_std=spread, random_state=seed)
    return Dataset(_scale_columns(X, *SYNTH_RANGE), y.astype(np.int64), n_classes, split)


def _read_bytes(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise DataFormatError(f"{path}: corrupt gzip stream") from e
    return raw


def read_idx(path, expected_magic=None):
    """Parse an IDX file (big-endian header, unsigned-byte payload)."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    if expected_magic is not None and magic != expected_magic:
        raise DataFormatError(f"{path}: expected magic 0x{expected_magic:08x}, got 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) != header + n:
        raise DataFormatError(f"{path}: payload has {len(raw) - header} bytes, dims {dims} need {n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, n_classes=10, split="train", subset=None):
    """MNIST-style image/label IDX pair; pixels scaled by 1/255."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    if subset is not None:
        images, labels = images[:subset], labels[:subset]
    X = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), n_classes, split, (1,) + images.shape[1:])


def load_cifar_binary(path, n_classes=10, split="train", subset=None, label_bytes=1):
    """CIFAR binary records: ``label_bytes`` label(s) then 3072 pixel bytes.

    With two label bytes (CIFAR-100) the second (fine) label is used.
    """
    raw = _read_bytes(path)
    rec = label_bytes + CIFAR_PIXELS
    if len(raw) == 0 or len(raw) % rec:
        raise DataFormatError(f"{path}: size {len(raw)} is not a positive multiple of {rec}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    if subset is not None:
        arr = arr[:subset]
    labels = arr[:, label_bytes - 1].astype(np.int64)
    X = arr[:, label_bytes:].astype(np.float64) / 255.0
    return Dataset(X, labels, n_classes, split, (3, 32, 32))


def save_dataset(ds, path):
    """Versioned ``.npz`` cache; round-trips bit-exactly."""
    with open(path, "wb") as f:
        np.savez(f, version=np.int64(CACHE_VERSION), features=ds.features, labels=ds.labels,
                 n_classes=np.int64(ds.n_classes), split=np.array(ds.split),
                 image_shape=np.array(ds.image_shape or (), dtype=np.int64))


def load_dataset(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            if int(z["version"]) != CACHE_VERSION:
                raise DataFormatError(f"{path}: unsupported cache version {int(z['version'])}")
            shape = tuple(int(s) for s in z["image_shape"]) or None
            return Dataset(z["features"], z["labels"], int(z["n_classes"]), str(z["split"]), shape)
    except (OSError, KeyError, ValueError) as e:
        if isinstance(e, DataFormatError):
            raise
        raise DataFormatError(f"{path}: not a dataset cache ({e})") from e


def write_idx(path, array):
    """Write a uint8 array as IDX (used to build fixtures)."""
    a = np.asarray(array, dtype=np.uint8)
    buf = io.BytesIO()
    buf.write(struct.pack(">I", 0x0800 | a.ndim))
    buf.write(struct.pack(f">{a.ndim}I", *a.shape))
    buf.write(a.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())
