"""Dataset ingestion: IDX (MNIST-style), CIFAR-10 binary batches and Gaussian blobs."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    pass


class TruncatedDataError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    input_shape: tuple[int, ...]
    name: str = ""

    @property
    def train(self):
        return self.x_train, self.y_train

    @property
    def test(self):
        return self.x_test, self.y_test


class IdxData(NamedTuple):
    x: np.ndarray  # (N, rows*cols) float32 in [0, 1]
    y: np.ndarray  # (N,) int64
    image_shape: tuple[int, ...]


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedDataError(f"{path}: file too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedDataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = len(raw) - header
    if payload < expected:
        raise TruncatedDataError(f"{path}: payload has {payload} bytes, header promises {expected}")
    if payload > expected:
        raise DatasetError(f"{path}: {payload - expected} trailing bytes after IDX payload")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> IdxData:
    """Parse an IDX image/label file pair (optionally gzipped). Pixels scale to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    n, rows, cols = images.shape
    x = images.reshape(n, rows * cols).astype(np.float32) / np.float32(255.0)
    return IdxData(x, labels.astype(np.int64), (1, rows, cols))


def load_cifar_binary(paths: Sequence | str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read CIFAR-10 binary batches: 1 label byte + 3072 channel-major pixel bytes per record."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    xs, ys = [], []
    for path in paths:
        raw = _read_bytes(path)
        full = len(raw) // CIFAR_RECORD
        if len(raw) % CIFAR_RECORD:
            raise TruncatedDataError(
                f"{path}: truncated record at byte offset {full * CIFAR_RECORD} "
                f"(file length {len(raw)} is not a multiple of {CIFAR_RECORD})"
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(full, CIFAR_RECORD)
        if full and rec[:, 0].max() > 9:
            raise DatasetError(f"{path}: label byte {int(rec[:, 0].max())} outside 0..9")
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].astype(np.float32) / np.float32(255.0))
    return np.concatenate(xs), np.concatenate(ys)


@dataclass
class DatasetSpec:
    source: str = "synthetic_blobs"  # idx_images | cifar_binary | synthetic_blobs
    # idx_images
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    # cifar_binary
    train_files: tuple[str, ...] = ()
    test_files: tuple[str, ...] = ()
    # synthetic_blobs
    n_classes: int = 2
    dim: int = 2
    cluster_std: float = 1.0
    center_distance: float = 10.0
    n_samples: int = 1000
    balanced: bool = True
    test_fraction: float = 0.2
    seed: int = 0
    # shared
    mean: tuple[float, ...] = (0.0,)
    std: tuple[float, ...] = (1.0,)
    train_limit: int = 0
    test_limit: int = 0
    flatten: bool = True
    base_dir: str = field(default="", repr=False)

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() or not self.base_dir else Path(self.base_dir) / q


def synth_blobs(spec: DatasetSpec) -> Dataset:
    """Isotropic Gaussian clusters whose centres sit pairwise ``center_distance`` apart."""
    c, d = spec.n_classes, spec.dim
    if c < 2:
        raise DatasetError(f"need at least 2 classes, got {c}")
    if not spec.cluster_std > 0:
        raise DatasetError(f"cluster_std must be positive, got {spec.cluster_std}")
    rng = np.random.default_rng(spec.seed)
    if d >= c:
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        centers = q[:, :c].T * (spec.center_distance / np.sqrt(2.0))
    else:
        centers = rng.standard_normal((c, d)) * spec.center_distance
    if spec.balanced:
        if spec.n_samples % c:
            raise DatasetError(f"balanced blobs need n_samples divisible by {c}")
        y = np.repeat(np.arange(c), spec.n_samples // c)
    else:
        y = rng.integers(0, c, spec.n_samples)
    x = centers[y] + spec.cluster_std * rng.standard_normal((spec.n_samples, d))
    order = rng.permutation(spec.n_samples)
    x, y = x[order].astype(np.float32), y[order].astype(np.int64)
    n_test = int(round(spec.test_fraction * spec.n_samples))
    n_train = spec.n_samples - n_test
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], c, (d,), "synthetic_blobs")


def _normalize(x: np.ndarray, mean, std, channels: int) -> np.ndarray:
    mean = np.asarray(mean, np.float32)
    std = np.asarray(std, np.float32)
    if mean.size > 1 or std.size > 1:
        per = x.shape[1] // channels
        mean = np.repeat(np.broadcast_to(mean, (channels,)), per)
        std = np.repeat(np.broadcast_to(std, (channels,)), per)
    return ((x - mean) / std).astype(np.float32)


def _subset(x, y, limit: int, seed: int):
    if limit and limit < len(x):
        idx = np.sort(np.random.default_rng(seed).permutation(len(x))[:limit])
        return x[idx], y[idx]
    return x, y


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.source == "synthetic_blobs":
        ds = synth_blobs(spec)
        ds.x_train = _normalize(ds.x_train, spec.mean, spec.std, 1)
        ds.x_test = _normalize(ds.x_test, spec.mean, spec.std, 1)
        return ds
    if spec.source == "idx_images":
        tr = load_idx(spec.path(spec.train_images), spec.path(spec.train_labels))
        te = load_idx(spec.path(spec.test_images), spec.path(spec.test_labels))
        shape, n_classes, channels = tr.image_shape, 10, 1
        xtr, ytr, xte, yte = tr.x, tr.y, te.x, te.y
        name = "idx_images"
    elif spec.source == "cifar_binary":
        xtr, ytr = load_cifar_binary([spec.path(p) for p in spec.train_files])
        xte, yte = load_cifar_binary([spec.path(p) for p in spec.test_files])
        shape, n_classes, channels = (3, 32, 32), 10, 3
        name = "cifar_binary"
    else:
        raise DatasetError(f"unknown dataset source {spec.source!r}")
    n_classes = max(n_classes, int(max(ytr.max(), yte.max())) + 1)
    xtr, ytr = _subset(xtr, ytr, spec.train_limit, spec.seed)
    xte, yte = _subset(xte, yte, spec.test_limit, spec.seed + 1)
    xtr = _normalize(xtr, spec.mean, spec.std, channels)
    xte = _normalize(xte, spec.mean, spec.std, channels)
    input_shape = (int(np.prod(shape)),) if spec.flatten else shape
    return Dataset(xtr, ytr, xte, yte, n_classes, input_shape, name)


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        if like and isinstance(like[0], float):
            return tuple(float(p) for p in parts)
        if like and isinstance(like[0], int):
            return tuple(int(p) for p in parts)
        return tuple(parts)
    return value


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def apply_kv(obj, values: dict[str, str]):
    """Set dataclass fields of ``obj`` from string values, coercing by the current field type."""
    known = {f.name for f in fields(obj)}
    for key, value in values.items():
        if key not in known:
            raise KeyError(f"unknown key {key!r}")
        setattr(obj, key, _coerce(value, getattr(obj, key)))
    return obj


def read_dataset_spec(path) -> DatasetSpec:
    path = Path(path)
    spec = apply_kv(DatasetSpec(), parse_kv(path.read_text()))
    if not spec.base_dir:
        spec.base_dir = str(path.parent)
    return spec
