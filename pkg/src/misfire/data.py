"""Dataset ingestion and generation.

Supports big-endian IDX image/label pairs (magic 0x00000803 / 0x00000801),
the CIFAR-10 binary layout (3073-byte records), and a seeded synthetic
shape dataset for fast runs. Pixels are always scaled to [0, 1].
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .container import DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073


@dataclass
class Dataset:
    """Images [N,C,H,W] in [0,1], integer labels, stable string ids."""

    images: np.ndarray
    labels: np.ndarray
    ids: list[str]
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        n = len(self.images)
        if len(self.labels) != n or len(self.ids) != n:
            raise ValueError(
                f"length mismatch: {n} images, {len(self.labels)} labels, {len(self.ids)} ids"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if n:
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ValueError("labels must lie in [0, num_classes)")
            lo, hi = float(self.images.min()), float(self.images.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"pixel values outside [0,1]: min {lo}, max {hi}")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[indices],
            self.labels[indices],
            [self.ids[i] for i in indices],
            self.num_classes,
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# ---------------------------------------------------------------------------
# IDX (big-endian)
# ---------------------------------------------------------------------------

def _read_be32(data: bytes, pos: int, path, what: str) -> int:
    if pos + 4 > len(data):
        raise DataFormatError(
            f"{path}: truncated while reading {what} at offset {pos} "
            f"(file has {len(data)} bytes)"
        )
    return struct.unpack(">I", data[pos : pos + 4])[0]


def load_idx(images_path, labels_path, id_prefix: str = "",
             num_classes: int | None = None) -> Dataset:
    """Load a big-endian IDX image/label pair into a single-channel dataset."""
    img_data = open(images_path, "rb").read()
    magic = _read_be32(img_data, 0, images_path, "magic")
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(
            f"{images_path}: bad magic at offset 0: expected "
            f"{IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"
        )
    count = _read_be32(img_data, 4, images_path, "image count")
    rows = _read_be32(img_data, 8, images_path, "row count")
    cols = _read_be32(img_data, 12, images_path, "column count")
    need = 16 + count * rows * cols
    if len(img_data) != need:
        raise DataFormatError(
            f"{images_path}: expected {need} bytes for {count} images of "
            f"{rows}x{cols}, file has {len(img_data)} (offset 16)"
        )
    lbl_data = open(labels_path, "rb").read()
    magic = _read_be32(lbl_data, 0, labels_path, "magic")
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(
            f"{labels_path}: bad magic at offset 0: expected "
            f"{IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"
        )
    lcount = _read_be32(lbl_data, 4, labels_path, "label count")
    if len(lbl_data) != 8 + lcount:
        raise DataFormatError(
            f"{labels_path}: expected {8 + lcount} bytes for {lcount} labels, "
            f"file has {len(lbl_data)} (offset 8)"
        )
    if lcount != count:
        raise DataFormatError(
            f"{labels_path}: {lcount} labels for {count} images in {images_path}"
        )
    if count == 0:
        images = np.zeros((0, 1, max(rows, 1), max(cols, 1)))
        labels = np.zeros(0, dtype=np.int64)
    else:
        pixels = np.frombuffer(img_data, dtype=np.uint8, offset=16)
        images = pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0
        labels = np.frombuffer(lbl_data, dtype=np.uint8, offset=8).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if count else 1
    ids = [f"{id_prefix}{i:06d}" for i in range(count)]
    return Dataset(images, labels, ids, num_classes)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a dataset as an IDX pair; pixels are quantized to u8."""
    if ds.images.shape[1] != 1:
        raise ValueError("IDX output supports single-channel images only")
    n, _, rows, cols = ds.images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(np.round(ds.images[:, 0] * 255.0).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------

def load_cifar_binary(path, id_prefix: str = "", num_classes: int = 10) -> Dataset:
    """Load CIFAR-10 binary batches: per record 1 label byte + 3072 pixel
    bytes, channel-major 3x32x32."""
    data = open(path, "rb").read()
    if len(data) % CIFAR_RECORD_BYTES != 0:
        raise DataFormatError(
            f"{path}: size {len(data)} is not a multiple of {CIFAR_RECORD_BYTES}-byte "
            f"records (first partial record at offset "
            f"{len(data) - len(data) % CIFAR_RECORD_BYTES})"
        )
    count = len(data) // CIFAR_RECORD_BYTES
    if count == 0:
        return Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=np.int64), [], num_classes)
    raw = np.frombuffer(data, dtype=np.uint8).reshape(count, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(count, 3, 32, 32).astype(np.float64) / 255.0
    ids = [f"{id_prefix}{i:06d}" for i in range(count)]
    return Dataset(images, labels, ids, num_classes)


def save_cifar_binary(ds: Dataset, path) -> None:
    """Write a 3-channel dataset in the CIFAR-10 binary record layout."""
    if ds.images.shape[1] != 3:
        raise ValueError("CIFAR binary output needs 3-channel images")
    with open(path, "wb") as fh:
        for i in range(len(ds)):
            fh.write(bytes([int(ds.labels[i])]))
            fh.write(np.round(ds.images[i] * 255.0).astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

_SIDE = 16


def _canvas() -> np.ndarray:
    return np.zeros((_SIDE, _SIDE))


def _patterns() -> list[np.ndarray]:
    pats = []
    c = _canvas(); c[7:10, 2:14] = 1.0; pats.append(c)              # horizontal bar
    c = _canvas(); c[2:14, 7:10] = 1.0; pats.append(c)              # vertical bar
    i, j = np.indices((_SIDE, _SIDE))
    c = _canvas(); c[np.abs(i - j) <= 1] = 1.0; pats.append(c)      # diagonal
    c = _canvas(); c[np.abs(i + j - (_SIDE - 1)) <= 1] = 1.0; pats.append(c)  # anti-diagonal
    c = _canvas(); c[7:9, 3:13] = 1.0; c[3:13, 7:9] = 1.0; pats.append(c)     # plus
    c = _canvas(); c[np.abs(i - j) <= 1] = 1.0
    c[np.abs(i + j - (_SIDE - 1)) <= 1] = 1.0; pats.append(c)       # X
    c = _canvas(); c[3:13, 3:13] = 1.0; c[6:10, 6:10] = 0.0; pats.append(c)   # thick ring
    c = _canvas(); c[5:11, 5:11] = 1.0; pats.append(c)              # blob
    c = _canvas(); c[1:15, 1:15] = 1.0; c[3:13, 3:13] = 0.0; pats.append(c)   # frame
    c = _canvas()
    c[(i // 4 + j // 4) % 2 == 0] = 1.0; pats.append(c)             # checkerboard
    return pats


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    ys = slice(max(dy, 0), _SIDE + min(dy, 0))
    xs = slice(max(dx, 0), _SIDE + min(dx, 0))
    ys_src = slice(max(-dy, 0), _SIDE + min(-dy, 0))
    xs_src = slice(max(-dx, 0), _SIDE + min(-dx, 0))
    out[ys, xs] = img[ys_src, xs_src]
    return out


def synth_shapes(num_per_class: int, classes: int, noise: float, seed: int) -> Dataset:
    """Seeded 16x16 single-channel dataset of geometric patterns.

    noise 0 renders every class's canonical pattern unchanged. noise > 0
    shifts each image by up to 2 pixels, dims the stroke, and adds Gaussian
    pixel noise whose per-image level is drawn from [0, 2*noise], so a run
    contains both easy images and a genuinely ambiguous hard tail.
    """
    patterns = _patterns()
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if classes > len(patterns):
        raise ValueError(f"at most {len(patterns)} distinct patterns are available")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.Generator(np.random.PCG64(seed))
    images = np.zeros((classes * num_per_class, 1, _SIDE, _SIDE))
    labels = np.zeros(classes * num_per_class, dtype=np.int64)
    idx = 0
    for c in range(classes):
        base = patterns[c]
        for _ in range(num_per_class):
            if noise > 0:
                dy, dx = rng.integers(-2, 3, size=2)
                amp = 1.0 - rng.uniform(0.0, min(0.5, noise))
                sigma = rng.uniform(0.0, 2.0 * noise)
                img = _shift(base, int(dy), int(dx)) * amp
                img = img + rng.normal(0.0, 1.0, base.shape) * sigma
                img = np.clip(img, 0.0, 1.0)
            else:
                img = base
            images[idx, 0] = img
            labels[idx] = c
            idx += 1
    ids = [f"s{i:06d}" for i in range(len(images))]
    return Dataset(images, labels, ids, classes)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def _largest_remainder_sizes(n: int, fractions) -> list[int]:
    raw = [f * n for f in fractions]
    sizes = [int(f) for f in raw]
    rem = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rem]:
        sizes[i] += 1
    return sizes


def split(ds: Dataset, fractions, seed: int, strict: bool = False
          ) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded permutation then contiguous train/val/test slices.

    Split sizes use largest-remainder rounding so every sample lands in
    exactly one split. A nonempty split missing some class warns, or raises
    in strict mode.
    """
    fractions = list(fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be 3 non-negative values")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(ds))
    sizes = _largest_remainder_sizes(len(ds), fractions)
    parts = []
    pos = 0
    for name, size in zip(("train", "val", "test"), sizes):
        sub = ds.subset(order[pos : pos + size])
        pos += size
        if size and len(np.unique(sub.labels)) < ds.num_classes:
            missing = sorted(set(range(ds.num_classes)) - set(sub.labels.tolist()))
            msg = f"{name} split is missing classes {missing}"
            if strict:
                raise ValueError(msg)
            warnings.warn(msg)
        parts.append(sub)
    return tuple(parts)
