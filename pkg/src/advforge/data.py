"""MNIST IDX ingestion, Gaussian corruption, seeded splits and detection sets."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import U_MAX, U_MIN

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TAGS = ("none", "bim", "deepfool")

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataFormatError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx_images(raw: bytes) -> np.ndarray:
    if len(raw) < 16:
        raise DataFormatError("image file shorter than its header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"bad image magic 0x{magic:08x}")
    body = raw[16:]
    if len(body) < n * rows * cols:
        raise DataFormatError(f"truncated image file: need {n * rows * cols} bytes, have {len(body)}")
    px = np.frombuffer(body, dtype=np.uint8, count=n * rows * cols)
    return px.reshape(n, 1, rows, cols).astype(np.float64) / 255.0


def parse_idx_labels(raw: bytes) -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError("label file shorter than its header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"bad label magic 0x{magic:08x}")
    if len(raw) - 8 < n:
        raise DataFormatError("truncated label file")
    return np.frombuffer(raw[8 : 8 + n], dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair. Pixels are scaled from bytes to [0, 1].

    Returns ``(images, labels)`` with images shaped ``(n, 1, rows, cols)``.
    """
    images = parse_idx_images(_read_bytes(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path))
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    return images, labels


def write_idx(images_path, labels_path, images_u8, labels_u8):
    """Write uint8 arrays as an IDX pair (used for fixtures)."""
    images_u8 = np.asarray(images_u8, np.uint8)
    n, rows, cols = images_u8.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels_u8)))
        fh.write(np.asarray(labels_u8, np.uint8).tobytes())


def data_dir(root=None) -> Path:
    """Explicit ``root``, else ``$ADVFORGE_DATA_DIR``, else ``data/mnist``."""
    return Path(root or os.environ.get("ADVFORGE_DATA_DIR") or "data/mnist")


def load_mnist(split="train", root=None):
    img, lab = MNIST_FILES[split]
    root = data_dir(root)
    return load_idx(root / img, root / lab)


def add_gaussian_noise(x, sigma_255: float, seed: int) -> np.ndarray:
    """Add N(0, (sigma_255/255)^2) per pixel, then clip to the valid range."""
    if sigma_255 < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(x, np.float64)
    if sigma_255 == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    return np.clip(x + rng.normal(0.0, sigma_255 / 255.0, size=x.shape), U_MIN, U_MAX)


def split(n_items: int, sizes: dict, seed: int) -> dict:
    """Disjoint seeded index subsets, e.g. ``split(10, {"a": 7, "b": 3}, 0)``."""
    total = sum(sizes.values())
    if any(v < 0 for v in sizes.values()) or total > n_items:
        raise ValueError(f"requested {total} items from a population of {n_items}")
    perm = np.random.default_rng(seed).permutation(n_items)
    out, start = {}, 0
    for name, size in sizes.items():
        out[name] = np.sort(perm[start : start + size])
        start += size
    return out


# ---------------------------------------------------------------------------
# detection sets
# ---------------------------------------------------------------------------

SET_MAGIC = b"ADVD"
SET_VERSION = 1
_FLAG_ADV = 1


@dataclass
class DetectionSet:
    """Mixed real/adversarial images with provenance.

    ``labels`` holds the correct class (for adversarials: the source image's
    label). ``tags`` index into :data:`TAGS`.
    """

    images: np.ndarray
    labels: np.ndarray
    is_adversarial: np.ndarray
    source_index: np.ndarray
    tags: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, np.float64)
        self.labels = np.asarray(self.labels, np.int64)
        self.is_adversarial = np.asarray(self.is_adversarial, bool)
        self.source_index = np.asarray(self.source_index, np.int64)
        self.tags = np.asarray(self.tags, np.int64)
        n = len(self.images)
        if not all(len(a) == n for a in (self.labels, self.is_adversarial, self.source_index, self.tags)):
            raise ValueError("detection set columns differ in length")
        if np.any(self.is_adversarial != (self.tags != 0)):
            raise ValueError("is_adversarial must match generator tag")

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "DetectionSet":
        return DetectionSet(self.images[idx], self.labels[idx], self.is_adversarial[idx], self.source_index[idx], self.tags[idx])

    @staticmethod
    def concat(*sets) -> "DetectionSet":
        return DetectionSet(*(np.concatenate([getattr(s, f) for s in sets]) for f in ("images", "labels", "is_adversarial", "source_index", "tags")))


def dumps_detection_set(ds: DetectionSet) -> bytes:
    """``ADVD`` | version u32 | count u64 | image shape 3*u32 | items.

    Each item: label u8, flags u8 (bit0 adversarial, bits1-2 tag), source u64,
    then the pixel block as little-endian f64.
    """
    shape = ds.images.shape[1:] if len(ds) else (1, 28, 28)
    parts = [SET_MAGIC, struct.pack("<IQ", SET_VERSION, len(ds)), struct.pack("<3I", *shape)]
    for i in range(len(ds)):
        flags = (_FLAG_ADV if ds.is_adversarial[i] else 0) | (int(ds.tags[i]) << 1)
        parts.append(struct.pack("<BBQ", int(ds.labels[i]), flags, int(ds.source_index[i])))
        parts.append(np.ascontiguousarray(ds.images[i], dtype="<f8").tobytes())
    return b"".join(parts)


def loads_detection_set(raw: bytes) -> DetectionSet:
    if len(raw) < 28 or raw[:4] != SET_MAGIC:
        raise DataFormatError("not an ADVD detection set")
    version, count = struct.unpack("<IQ", raw[4:16])
    if version != SET_VERSION:
        raise DataFormatError(f"unsupported detection set version {version}")
    shape = struct.unpack("<3I", raw[16:28])
    m = int(np.prod(shape))
    rec = np.dtype([("label", "u1"), ("flags", "u1"), ("source", "<u8"), ("px", "<f8", (m,))])
    if len(raw) - 28 != count * rec.itemsize:
        raise DataFormatError("detection set size does not match its header")
    items = np.frombuffer(raw, dtype=rec, count=count, offset=28)
    flags = items["flags"].astype(np.int64)
    return DetectionSet(
        images=items["px"].reshape(count, *shape).astype(np.float64),
        labels=items["label"].astype(np.int64),
        is_adversarial=(flags & _FLAG_ADV).astype(bool),
        source_index=items["source"].astype(np.int64),
        tags=flags >> 1,
    )


def save_detection_set(path, ds):
    Path(path).write_bytes(dumps_detection_set(ds))


def load_detection_set(path) -> DetectionSet:
    return loads_detection_set(Path(path).read_bytes())
