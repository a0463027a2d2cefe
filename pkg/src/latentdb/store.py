"""Embedding corpora: in-memory matrices, normalization stats, FPE1 file I/O.

The FPE1 binary format (little-endian) is::

    magic "FPE1" | version u32 = 1 | dim u32 | count u64
    | ids: count x u64 | payload: count x dim x f32

Files round-trip bit-exactly. A JSON sidecar ``<name>.stats.json`` stores
per-dimension normalization statistics.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

FPE1_MAGIC = b"FPE1"
FPE1_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")

STD_FLOOR = 1e-6


def _as_f32_matrix(data: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"embedding data must be 2-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class EmbeddingMatrix:
    """A dense set of d-dimensional float32 vectors with stable row ids.

    Immutable after construction; the underlying arrays are marked
    read-only so instances can be shared freely across threads.
    """

    data: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        data = _as_f32_matrix(self.data)
        ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        if ids.ndim != 1 or ids.shape[0] != data.shape[0]:
            raise ValueError(
                f"ids length {ids.shape} does not match row count {data.shape[0]}"
            )
        if not np.isfinite(data).all():
            raise ValueError("embedding data contains NaN or Inf")
        if np.unique(ids).size != ids.size:
            raise ValueError("row ids must be unique within a matrix")
        data.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", ids)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_array(cls, data: np.ndarray, ids: np.ndarray | None = None) -> "EmbeddingMatrix":
        """Wrap an array, assigning sequential row-index ids when none given."""
        data = _as_f32_matrix(data)
        if ids is None:
            ids = np.arange(data.shape[0], dtype=np.uint64)
        return cls(data=data, ids=ids)


@dataclass(frozen=True)
class NormStats:
    """Per-dimension mean and standard deviation (std floored at 1e-6)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float32)
        std = np.ascontiguousarray(self.std, dtype=np.float32)
        if mean.ndim != 1 or std.shape != mean.shape:
            raise ValueError("mean and std must be 1-D vectors of equal length")
        if not (np.isfinite(mean).all() and np.isfinite(std).all()):
            raise ValueError("norm stats contain NaN or Inf")
        if (std <= 0).any():
            raise ValueError("std entries must be strictly positive")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class QuerySet:
    """Query vectors plus the ground-truth map query id -> reference id."""

    queries: EmbeddingMatrix
    truth: dict = field(default_factory=dict)

    def __post_init__(self):
        qids = {int(i) for i in self.queries.ids}
        tids = set(self.truth.keys())
        if qids != tids:
            missing = qids - tids
            extra = tids - qids
            raise ValueError(
                f"truth map must cover every query id exactly once "
                f"(missing={sorted(missing)[:5]}, extra={sorted(extra)[:5]})"
            )


def save_embeddings(m: EmbeddingMatrix, path) -> None:
    """Write a matrix in FPE1 format. Reloading reproduces it bit-exactly."""
    path = Path(path)
    header = _HEADER.pack(FPE1_MAGIC, FPE1_VERSION, m.dim, m.count)
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(m.ids, dtype="<u8").tobytes())
            f.write(np.ascontiguousarray(m.data, dtype="<f4").tobytes())
    except OSError as e:
        raise OSError(f"failed writing embeddings to {path}: {e}") from e


def load_embeddings(path) -> EmbeddingMatrix:
    """Load an FPE1 file, validating format, length, and finiteness."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"failed reading embeddings from {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than FPE1 header")
    magic, version, dim, count = _HEADER.unpack_from(raw, 0)
    if magic != FPE1_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FPE1_MAGIC!r}")
    if version != FPE1_VERSION:
        raise FormatError(f"{path}: unsupported FPE1 version {version}")
    if dim == 0:
        raise FormatError(f"{path}: dim must be positive")
    ids_bytes = count * 8
    payload_bytes = count * dim * 4
    expected = _HEADER.size + ids_bytes + payload_bytes
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for count={count} dim={dim}, "
            f"got {len(raw)}"
        )
    ids = np.frombuffer(raw, dtype="<u8", count=count, offset=_HEADER.size)
    data = np.frombuffer(
        raw, dtype="<f4", count=count * dim, offset=_HEADER.size + ids_bytes
    ).reshape(count, dim)
    return EmbeddingMatrix(data=data.copy(), ids=ids.copy())


def compute_norm_stats(m: EmbeddingMatrix) -> NormStats:
    """Per-dimension mean and population standard deviation of a corpus."""
    if m.count < 2:
        raise ValueError(f"need at least 2 rows to compute norm stats, got {m.count}")
    mean = m.data.mean(axis=0, dtype=np.float64)
    std = m.data.std(axis=0, dtype=np.float64)
    std = np.maximum(std, STD_FLOOR)
    return NormStats(mean=mean.astype(np.float32), std=std.astype(np.float32))


def standardize_array(data: np.ndarray, stats: NormStats) -> np.ndarray:
    if data.shape[1] != stats.dim:
        raise ValueError(f"dim mismatch: data {data.shape[1]} vs stats {stats.dim}")
    return ((data - stats.mean) / stats.std).astype(np.float32)


def destandardize_array(data: np.ndarray, stats: NormStats) -> np.ndarray:
    if data.shape[1] != stats.dim:
        raise ValueError(f"dim mismatch: data {data.shape[1]} vs stats {stats.dim}")
    return (data * stats.std + stats.mean).astype(np.float32)


def standardize(m: EmbeddingMatrix, stats: NormStats) -> EmbeddingMatrix:
    """Map each column to (x - mean) / std; row ids are preserved."""
    return EmbeddingMatrix(data=standardize_array(m.data, stats), ids=m.ids)


def destandardize(m: EmbeddingMatrix, stats: NormStats) -> EmbeddingMatrix:
    """Inverse of :func:`standardize`: x * std + mean."""
    return EmbeddingMatrix(data=destandardize_array(m.data, stats), ids=m.ids)


def sample_rows(m: EmbeddingMatrix, n: int, seed: int) -> EmbeddingMatrix:
    """Select n distinct rows uniformly without replacement, seeded."""
    if n > m.count:
        raise ValueError(f"cannot sample {n} rows from a matrix of {m.count}")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(m.count)[:n]
    return EmbeddingMatrix(data=m.data[idx], ids=m.ids[idx])


def save_norm_stats(stats: NormStats, path) -> None:
    """Write the `<name>.stats.json` sidecar."""
    doc = {
        "dim": stats.dim,
        "mean": [float(v) for v in stats.mean],
        "std": [float(v) for v in stats.std],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_norm_stats(path) -> NormStats:
    try:
        doc = json.loads(Path(path).read_text())
        mean = np.asarray(doc["mean"], dtype=np.float32)
        std = np.asarray(doc["std"], dtype=np.float32)
        dim = int(doc["dim"])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed stats sidecar: {e}") from e
    if mean.shape[0] != dim or std.shape[0] != dim:
        raise FormatError(f"{path}: stats vectors do not match declared dim {dim}")
    return NormStats(mean=mean, std=std)
