"""Datasets: synthetic 2-D generators, the IDX (MNIST) binary format, splits."""
from __future__ import annotations

import csv
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

DATA_DIR_ENV = "TRGL_DATA_DIR"
DEFAULT_DATA_DIR = Path.home() / ".cache" / "trgl"

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

# sha256 of the uncompressed public MNIST files, recorded when the local copy
# was checked (60000 training images of 28x28, first training label 5).
MNIST_FILES = {
    "train_images": (
        ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    ),
    "train_labels": (
        ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    ),
    "test_images": (
        ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    ),
    "test_labels": (
        ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    ),
}

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    split: np.ndarray = None
    n_classes: int = 0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise DataError(f"features must be a matrix, got shape {self.X.shape}")
        if self.split is None:
            self.split = np.full(len(self.y), "train")
        self.split = np.asarray(self.split, dtype="<U5")
        if not (len(self.X) == len(self.y) == len(self.split)):
            raise DataError(f"row counts differ: X {len(self.X)}, y {len(self.y)}, split {len(self.split)}")
        if not self.n_classes:
            self.n_classes = int(self.y.max()) + 1 if len(self.y) else 0
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise DataError(f"labels outside [0, {self.n_classes})")
        bad = set(np.unique(self.split)) - set(SPLITS)
        if bad:
            raise DataError(f"unknown split tags {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def take(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        tags = self.split[idx] if split is None else np.full(len(idx), split)
        return Dataset(self.X[idx], self.y[idx], tags, self.n_classes, dict(self.provenance))

    def part(self, tag: str) -> "Dataset":
        return self.take(np.flatnonzero(self.split == tag))

    def xy(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == tag
        return self.X[mask], self.y[mask]


def concat(*parts: Dataset) -> Dataset:
    n_classes = max(p.n_classes for p in parts)
    return Dataset(
        np.concatenate([p.X for p in parts]),
        np.concatenate([p.y for p in parts]),
        np.concatenate([p.split for p in parts]),
        n_classes,
        dict(parts[0].provenance),
    )


# ---------------------------------------------------------------------------
# synthetic generators


def _class_sizes(n: int, n_classes: int) -> list[int]:
    base, extra = divmod(n, n_classes)
    return [base + (1 if c >= n_classes - extra else 0) for c in range(n_classes)]


def gen_two_moons(n: int, noise_sigma: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved half circles; class 0 is the upper unit semicircle."""
    if n < 2:
        raise DataError(f"two moons needs n >= 2, got {n}")
    n0, n1 = _class_sizes(n, 2)
    rng = np.random.default_rng(seed)
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    X = np.vstack([upper, lower])
    if noise_sigma > 0:
        X = X + noise_sigma * rng.standard_normal(X.shape)
    y = np.repeat([0, 1], [n0, n1])
    order = rng.permutation(n)
    return Dataset(X[order], y[order], None, 2, {"generator": "two_moons", "seed": seed,
                                               "n": n, "noise": noise_sigma})


def gen_gaussian_mixture(n: int, centers, sigma: float = 0.5, seed: int = 0) -> Dataset:
    centers = np.asarray(centers, dtype=np.float64)
    n_classes = len(centers)
    if n < n_classes or n_classes < 1:
        raise DataError(f"need n >= number of centers, got n={n}, centers={n_classes}")
    rng = np.random.default_rng(seed)
    sizes = _class_sizes(n, n_classes)
    y = np.repeat(np.arange(n_classes), sizes)
    X = centers[y] + sigma * rng.standard_normal((n, centers.shape[1]))
    order = rng.permutation(n)
    return Dataset(X[order], y[order], None, n_classes, {"generator": "gaussian_mixture", "seed": seed,
                                                       "n": n, "sigma": sigma})


# ---------------------------------------------------------------------------
# IDX format


@dataclass(frozen=True)
class IdxHeader:
    magic: int
    dims: tuple[int, ...]


def parse_idx(data: bytes) -> tuple[IdxHeader, np.ndarray]:
    """Decode an IDX file: images become floats in [0, 1], labels integers."""
    if len(data) < 8:
        raise FormatError(f"IDX stream too short: {len(data)} bytes")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise FormatError(f"bad IDX magic 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(data) < head:
        raise FormatError(f"IDX header truncated: expected {head} bytes, got {len(data)}")
    dims = struct.unpack(">" + "I" * ndim, data[4:head])
    expected = int(np.prod(dims))
    actual = len(data) - head
    if actual != expected:
        raise FormatError(f"IDX payload size mismatch: expected {expected} bytes, got {actual}")
    raw = np.frombuffer(data, dtype=np.uint8, offset=head).reshape(dims)
    if magic == IDX_IMAGES:
        return IdxHeader(magic, dims), raw.astype(np.float64) / 255.0
    return IdxHeader(magic, dims), raw.astype(np.int64)


def serialize_idx(header: IdxHeader, values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if header.magic == IDX_IMAGES:
        payload = np.rint(values * 255.0).astype(np.uint8)
    elif header.magic == IDX_LABELS:
        payload = values.astype(np.uint8)
    else:
        raise FormatError(f"bad IDX magic 0x{header.magic:08x}")
    if payload.shape != tuple(header.dims):
        raise FormatError(f"values of shape {payload.shape} do not match header dims {header.dims}")
    return struct.pack(">I", header.magic) + struct.pack(">" + "I" * len(header.dims), *header.dims) + payload.tobytes()


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, DEFAULT_DATA_DIR))


def _find_mnist_file(root: Path, key: str) -> Path | None:
    names, _ = MNIST_FILES[key]
    for name in names:
        for candidate in (root / "mnist" / name, root / name):
            if candidate.exists():
                return candidate
    return None


def mnist_available(root=None) -> bool:
    root = Path(root) if root is not None else data_dir()
    return all(_find_mnist_file(root, key) for key in MNIST_FILES)


def load_mnist(root=None, verify: bool = True) -> tuple[Dataset, Dataset]:
    """Train and test sets from raw IDX files under the data directory."""
    root = Path(root) if root is not None else data_dir()
    arrays = {}
    digests = {}
    for key, (_, sha) in MNIST_FILES.items():
        path = _find_mnist_file(root, key)
        if path is None:
            raise DataError(f"MNIST file for {key} not found under {root}")
        blob = path.read_bytes()
        digest = hashlib.sha256(blob).hexdigest()
        if verify and digest != sha:
            raise DataError(f"{path}: sha256 {digest} does not match the published file")
        digests[key] = digest
        arrays[key] = parse_idx(blob)[1]
    out = []
    for part in ("train", "test"):
        images, labels = arrays[f"{part}_images"], arrays[f"{part}_labels"]
        out.append(Dataset(images.reshape(len(images), -1), labels, None, 10,
                           {"source": "mnist", "part": part, "sha256": digests[f"{part}_images"]}))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# subsetting and splits


def _quotas(counts: np.ndarray, size: int, balanced: bool) -> np.ndarray:
    if balanced:
        quotas = np.full(len(counts), size // len(counts))
        quotas[: size - quotas.sum()] += 1
        if np.any(quotas > counts):
            raise DataError("not enough rows in some class for a balanced subset")
        return quotas
    exact = counts * size / counts.sum()
    quotas = np.floor(exact).astype(np.int64)
    order = np.argsort(-(exact - quotas), kind="stable")
    quotas[order[: size - quotas.sum()]] += 1
    return quotas


def subset(dataset: Dataset, train_size: int, seed: int = 0, balanced: bool = False) -> Dataset:
    """Stratified subsample of ``train_size`` rows in original row order.

    Per-class counts are proportional to the class frequencies (largest
    remainder rounding) or, with ``balanced``, equal up to one.
    """
    n = len(dataset)
    if train_size > n:
        raise DataError(f"train_size {train_size} exceeds dataset size {n}")
    if train_size < dataset.n_classes:
        raise DataError(f"train_size {train_size} < number of classes {dataset.n_classes}")
    if train_size == n:
        return dataset.take(np.arange(n))
    counts = np.bincount(dataset.y, minlength=dataset.n_classes)
    quotas = _quotas(counts, train_size, balanced)
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(dataset.n_classes):
        rows = np.flatnonzero(dataset.y == c)
        chosen.append(rng.choice(rows, size=quotas[c], replace=False))
    return dataset.take(np.sort(np.concatenate(chosen)))


def split_validation(dataset: Dataset, fraction: float = 0.1, seed: int = 0) -> Dataset:
    """Retag a deterministic ``fraction`` of the training rows as validation."""
    train_idx = np.flatnonzero(dataset.split == "train")
    n_val = int(round(fraction * len(train_idx)))
    rng = np.random.default_rng(seed)
    val = rng.choice(train_idx, size=n_val, replace=False)
    tags = dataset.split.copy()
    tags[val] = "val"
    return Dataset(dataset.X, dataset.y, tags, dataset.n_classes, dict(dataset.provenance))


def prepare_splits(train: Dataset, test: Dataset, val_fraction: float = 0.1,
                   train_size: int | None = None, seed: int = 0, balanced: bool = False) -> Dataset:
    """One tagged dataset: validation carved from train first, then subsetting."""
    tagged = split_validation(train.take(np.arange(len(train)), "train"), val_fraction, seed)
    tr, va = tagged.part("train"), tagged.part("val")
    if train_size is not None:
        tr = subset(tr, train_size, seed, balanced)
    return concat(tr, va, test.take(np.arange(len(test)), "test"))


def save_points(dataset: Dataset, path, split: str | None = None) -> None:
    """Write rows as ``x0,...,x{d-1},label`` text, readable by ``ot.load_cloud``."""
    part = dataset if split is None else dataset.part(split)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(part.input_dim)] + ["label"])
        for x, label in zip(part.X, part.y):
            writer.writerow([repr(float(v)) for v in x] + [int(label)])
