"""Dataset ingestion: IDX, CSV, and a seeded synthetic patch task.

IDX follows the MNIST convention: a 4-byte big-endian magic ``00 00 TT DD``
(``TT`` the element type, ``DD`` the rank), ``DD`` big-endian u32 dims, then
row-major data. Images use ``TT = 0x08`` (u8) or ``0x0D`` (f32); labels are
a rank-1 u8 file.

CSV has one sample per row, ``label,p0,p1,...``, pixels row-major over a
square single-channel image. Values above 1 are taken as 0..255.
"""

import csv
import struct
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    pass


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [n, H, W, c], float32 in [0, 1]
    labels: np.ndarray
    n_classes: int
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValidationError(f"{len(self.images)} images but {len(self.labels)} labels")
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.n_classes))
        if bad.size:
            i = int(bad[0])
            raise ValidationError(f"label {self.labels[i]} at sample {i} is outside [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    def split(self, name):
        idx = self.splits[name]
        return self.images[idx], self.labels[idx]


def make_splits(n, seed, fractions=(0.6, 0.2, 0.2)) -> dict:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValidationError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {"train": np.sort(order[:n_train]), "val": np.sort(order[n_train:n_train + n_val]),
            "test": np.sort(order[n_train + n_val:])}


# --- builtin synthetic ---------------------------------------------------------

def synthetic(seed=7, n=600, n_classes=10, size=16, noise=0.25, max_shift=2):
    """Class templates of smoothed random strokes, jittered, rescaled and noised.

    Templates depend only on ``seed``; labels cycle through the classes so the
    balance is fixed (``n // n_classes`` each, remainder to the low classes).
    """
    rng = np.random.default_rng(seed)
    templates = np.zeros((n_classes, size, size))
    for c in range(n_classes):
        for _ in range(3):
            r0, c0 = rng.integers(2, size - 2, 2)
            dr, dc = rng.normal(size=2)
            for t in np.linspace(-4, 4, 25):
                r = int(np.clip(round(r0 + t * dr), 0, size - 1))
                k = int(np.clip(round(c0 + t * dc), 0, size - 1))
                templates[c, r, k] = 1.0
    # cheap blur: average with 4-neighbours
    blurred = templates.copy()
    for axis in (1, 2):
        blurred += np.roll(templates, 1, axis) + np.roll(templates, -1, axis)
    templates = np.clip(blurred / 3.0, 0, 1)

    labels = rng.permutation(np.arange(n) % n_classes)
    images = np.empty((n, size, size), dtype=np.float64)
    for i, y in enumerate(labels):
        dr, dc = rng.integers(-max_shift, max_shift + 1, 2)
        img = np.roll(templates[y], (dr, dc), axis=(0, 1)) * rng.uniform(0.6, 1.0)
        images[i] = img + noise * rng.normal(size=(size, size))
    images = np.clip(images, 0, 1).astype(np.float32)[..., None]
    return images, labels


# --- IDX ---------------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    data = open(path, "rb").read()
    if len(data) < 4:
        raise ParseError(f"{path}: file shorter than the 4-byte magic (byte offset {len(data)})")
    zero, dtype_code, rank = struct.unpack_from(">HBB", data, 0)
    if zero != 0 or dtype_code not in _IDX_TYPES:
        raise ParseError(f"{path}: bad IDX magic {data[:4].hex()} at byte offset 0")
    if rank == 0:
        raise ParseError(f"{path}: IDX rank 0 at byte offset 3")
    if len(data) < 4 + 4 * rank:
        raise ParseError(f"{path}: truncated dimension list at byte offset {len(data)}")
    dims = struct.unpack_from(f">{rank}I", data, 4)
    dt = np.dtype(_IDX_TYPES[dtype_code])
    offset = 4 + 4 * rank
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(data) - offset != need:
        raise ParseError(f"{path}: expected {need} data bytes after byte offset {offset}, found {len(data) - offset}")
    return np.frombuffer(data, dtype=dt, offset=offset).reshape(dims)


def write_idx(path, array):
    """Write u8 or f32 arrays in IDX format (used by tests and demos)."""
    array = np.asarray(array)
    code = 0x08 if array.dtype == np.uint8 else 0x0D
    dt = ">u1" if code == 0x08 else ">f4"
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array, dtype=dt).tobytes())


def _normalize(images):
    images = np.asarray(images, dtype=np.float64)
    if images.size and images.max() > 1.0:
        images = images / 255.0
    return np.clip(images, 0.0, 1.0).astype(np.float32)


def _load_idx(path):
    if isinstance(path, (tuple, list)):
        img_path, lbl_path = path
    else:
        img_path, _, lbl_path = str(path).partition(",")
        if not lbl_path:
            raise DataError("idx format needs 'images_path,labels_path'")
    images = read_idx(img_path)
    labels = read_idx(lbl_path)
    if labels.ndim != 1:
        raise ParseError(f"{lbl_path}: labels must be rank 1, got rank {labels.ndim}")
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise ParseError(f"{img_path}: images must be rank 3 or 4, got rank {images.ndim}")
    return _normalize(images), labels.astype(np.int64)


def _load_csv(path):
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                label = int(row[0])
                pixels = [float(v) for v in row[1:]]
            except ValueError:
                raise ValidationError(f"{path}: row {lineno} has a non-numeric value") from None
            if rows and len(pixels) != len(rows[0]):
                raise ValidationError(f"{path}: row {lineno} has {len(pixels)} pixels, expected {len(rows[0])}")
            labels.append(label)
            rows.append(pixels)
    if not rows:
        raise ValidationError(f"{path}: no samples")
    side = int(round(np.sqrt(len(rows[0]))))
    if side * side != len(rows[0]):
        raise ValidationError(f"{path}: {len(rows[0])} pixels per row is not a square image")
    images = np.asarray(rows).reshape(len(rows), side, side, 1)
    return _normalize(images), np.asarray(labels, dtype=np.int64)


def load_dataset(path=None, format="builtin-synthetic", *, seed=7, n=600, n_classes=None,
                 fractions=(0.6, 0.2, 0.2), split_seed=None) -> Dataset:
    """Load and split a dataset. ``format`` is ``idx``, ``csv`` or ``builtin-synthetic``."""
    if format in ("builtin-synthetic", "synthetic", "builtin"):
        k = 10 if n_classes is None else n_classes
        images, labels = synthetic(seed=seed, n=n, n_classes=k)
        n_classes = k
    elif format == "idx":
        images, labels = _load_idx(path)
    elif format == "csv":
        images, labels = _load_csv(path)
    else:
        raise DataError(f"unknown dataset format {format!r}")
    if n_classes is None:
        if (labels < 0).any():
            raise ValidationError(f"negative label {labels.min()}")
        n_classes = int(labels.max()) + 1
    ds = Dataset(images, labels, int(n_classes))
    ds.splits = make_splits(len(ds), seed if split_seed is None else split_seed, fractions)
    return ds
