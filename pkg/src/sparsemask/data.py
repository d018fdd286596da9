"""IDX-format ingestion, seeded batching, and synthetic test datasets.

IDX files are parsed bit-exactly: 4-byte big-endian magic (0x00000803
for images, 0x00000801 for labels), big-endian u32 dimensions, raw u8
payload. Gzip-compressed files are accepted transparently. Pixels are
scaled to [0,1]; no further standardization.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Malformed, inconsistent, or checksum-failing dataset input."""


@dataclass
class LabeledDataset:
    """Sample tensor (leading axis N) with integer labels in [0, classes)."""

    images: Tensor
    labels: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != len(self.labels):
            raise DataError(
                f"{self.images.shape[0]} samples vs {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from an integer tuple (SeedSequence mixing)."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)
    return int(state[0] >> 1)


def _read_bytes(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw: bytes, expected_magic: int, ndim: int, path) -> tuple[tuple[int, ...], int]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DataError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    return dims, header


def load_idx(images_path: str | Path, labels_path: str | Path) -> LabeledDataset:
    """Load an MNIST-family image/label file pair."""
    img_raw = _read_bytes(images_path)
    (n, rows, cols), offset = _parse_header(img_raw, IMAGES_MAGIC, 3, images_path)
    if (rows, cols) != (28, 28):
        raise DataError(f"{images_path}: expected 28x28 images, got {rows}x{cols}")
    payload = img_raw[offset:]
    if len(payload) != n * rows * cols:
        raise DataError(f"{images_path}: truncated payload ({len(payload)} bytes for N={n})")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, 1, rows, cols)

    lab_raw = _read_bytes(labels_path)
    (n_labels,), offset = _parse_header(lab_raw, LABELS_MAGIC, 1, labels_path)
    lab_payload = lab_raw[offset:]
    if len(lab_payload) != n_labels:
        raise DataError(f"{labels_path}: truncated payload")
    if n_labels != n:
        raise DataError(f"{n} images vs {n_labels} labels")
    labels = np.frombuffer(lab_payload, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataError(f"{labels_path}: label {labels.max()} outside [0,10)")

    images = Tensor((pixels / 255.0).astype(np.float32))
    return LabeledDataset(images, labels)


def batches(ds: LabeledDataset, plan: BatchPlan, epoch: int):
    """Deterministic shuffled minibatches for one epoch.

    The permutation is a pure function of (plan.seed, epoch); slices are
    contiguous over it.
    """
    n = len(ds)
    if plan.batch_size > n:
        raise ValueError(f"batch_size {plan.batch_size} exceeds dataset size {n}")
    rng = np.random.default_rng(np.random.SeedSequence([plan.seed, epoch]))
    perm = rng.permutation(n)
    stop = n - n % plan.batch_size if plan.drop_last else n
    for start in range(0, stop, plan.batch_size):
        idx = perm[start : start + plan.batch_size]
        yield Tensor(ds.images.data[idx]), ds.labels[idx]


def synthetic_blobs(n_per_class: int, classes: int, dim: int, seed: int) -> LabeledDataset:
    """Well-separated Gaussian clusters for fast, hermetic tests.

    Class means sit on distinct coordinate axes (unit-separated shells);
    the cluster spread is small enough that a linear model separates
    them by construction.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if dim < 1:
        raise ValueError(f"dim must be positive, got {dim}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB10B5]))
    means = np.zeros((classes, dim), dtype=np.float64)
    for k in range(classes):
        means[k, k % dim] = 1.0 + k // dim
    x = np.empty((classes * n_per_class, dim), dtype=np.float32)
    y = np.empty(classes * n_per_class, dtype=np.int64)
    for k in range(classes):
        rows = slice(k * n_per_class, (k + 1) * n_per_class)
        x[rows] = (means[k] + 0.08 * rng.standard_normal((n_per_class, dim))).astype(np.float32)
        y[rows] = k
    return LabeledDataset(Tensor(x), y)


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def verify_checksum(path: str | Path, expected: str) -> None:
    actual = sha256_file(path)
    if actual != expected.lower():
        raise DataError(f"{path}: sha256 {actual} != expected {expected}")


def fetch_file(url: str, dest: str | Path, sha256: str | None = None, timeout: float = 60.0) -> Path:
    """Download url to dest unless a (checksum-valid) copy already exists.

    Network access is optional throughout: callers that ship files by
    hand never reach the download path.
    """
    dest = Path(dest)
    if dest.exists():
        if sha256:
            verify_checksum(dest, sha256)
        return dest
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_suffix(dest.suffix + ".part")
    with urllib.request.urlopen(url, timeout=timeout) as resp, open(tmp, "wb") as out:
        while True:
            chunk = resp.read(1 << 20)
            if not chunk:
                break
            out.write(chunk)
    if sha256:
        try:
            verify_checksum(tmp, sha256)
        except DataError:
            tmp.unlink(missing_ok=True)
            raise
    tmp.rename(dest)
    return dest
