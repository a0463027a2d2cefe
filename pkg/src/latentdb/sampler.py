"""Sampling: integrate the learned velocity field from noise to data.

Starting from x_1 ~ N(0, I), T explicit Euler steps walk the time grid
t = 1, 1-dt, ..., dt down to t = 0; each step removes dt times the
predicted data-to-noise velocity. Outputs are rescaled with the training
statistics.

The noise stream is indexed by global row number (counter-based Philox
plus Box-Muller), so row i receives the same noise for a given seed no
matter how generation is batched; streaming and in-memory generation are
bit-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import NumericError
from .flownet import VelocityNet
from .store import (
    FPE1_MAGIC,
    FPE1_VERSION,
    EmbeddingMatrix,
    NormStats,
    destandardize_array,
)

_HEADER = struct.Struct("<4sIIQ")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    batch_size: int = 8192
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def _u64_per_row(dim: int) -> int:
    # two uniforms per Box-Muller pair, padded to whole Philox blocks (4 u64)
    need = 2 * ((dim + 1) // 2)
    return 4 * ((need + 3) // 4)


def noise_rows(seed: int, start: int, count: int, dim: int) -> np.ndarray:
    """Standard-normal noise for global rows [start, start+count).

    Row i depends only on (seed, i), so any batch partitioning yields
    the same per-row values.
    """
    if count == 0:
        return np.zeros((0, dim), dtype=np.float32)
    per_row = _u64_per_row(dim)
    bg = np.random.Philox(key=seed)
    bg.advance(start * (per_row // 4))
    raw = bg.random_raw(count * per_row).reshape(count, per_row)
    u = ((raw >> np.uint64(11)) + np.uint64(1)) * np.float64(2.0**-53)  # (0, 1]
    pairs = 2 * ((dim + 1) // 2)
    u1 = u[:, 0:pairs:2]
    u2 = u[:, 1:pairs:2]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty((count, pairs), dtype=np.float64)
    z[:, 0::2] = r * np.cos(2.0 * np.pi * u2)
    z[:, 1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:, :dim].astype(np.float32)


def euler_integrate(velocity_fn, z: np.ndarray, steps: int) -> np.ndarray:
    """Integrate the data-to-noise field backwards from x_1 = z to x_0.

    `velocity_fn(x, t)` receives the current batch and the scalar time of
    the interval's left endpoint; each of the T steps applies
    x <- x - (1/T) * velocity_fn(x, t) for t = 1, 1-dt, ..., dt.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    z = np.asarray(z, dtype=np.float32)
    if not np.isfinite(z).all():
        raise ValueError("initial noise contains NaN or Inf")
    x = z.copy()
    dt = np.float32(1.0 / steps)
    for i in range(steps):
        t = (steps - i) / steps
        v = velocity_fn(x, t)
        if v.shape != x.shape:
            raise ValueError(f"velocity has shape {v.shape}, expected {x.shape}")
        x = x - dt * np.asarray(v, dtype=np.float32)
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite state after integration step {i}")
    return x


def net_velocity_fn(net: VelocityNet):
    """Adapt a velocity network to the (batch, scalar t) callable shape."""

    def fn(x: np.ndarray, t: float) -> np.ndarray:
        with torch.no_grad():
            xt = torch.from_numpy(x)
            tt = torch.full((x.shape[0],), float(t), dtype=xt.dtype)
            return net(xt, tt).numpy()

    return fn


def _generate_batches(net, stats, n, config, unit_norm):
    """Yield (start, rows) batches; shared by in-memory and streaming paths."""
    if n < 1:
        raise ValueError("must generate at least one row")
    if stats.dim != net.config.dim:
        raise ValueError(f"stats dim {stats.dim} != model dim {net.config.dim}")
    vfn = net_velocity_fn(net)
    for start in range(0, n, config.batch_size):
        count = min(config.batch_size, n - start)
        z = noise_rows(config.seed, start, count, net.config.dim)
        x = euler_integrate(vfn, z, config.steps)
        rows = destandardize_array(x, stats)
        if unit_norm:
            norms = np.linalg.norm(rows, axis=1, keepdims=True)
            rows = rows / np.maximum(norms, np.float32(1e-30))
        if not np.isfinite(rows).all():
            raise NumericError(f"non-finite generated rows in batch at {start}")
        yield start, rows


def generate(
    net: VelocityNet,
    stats: NormStats,
    n: int,
    config: SamplerConfig,
    *,
    id_base: int = 0,
    unit_norm: bool = False,
) -> EmbeddingMatrix:
    """Generate n synthetic rows in memory; deterministic per seed."""
    parts = [rows for _, rows in _generate_batches(net, stats, n, config, unit_norm)]
    data = np.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]
    ids = id_base + np.arange(n, dtype=np.uint64)
    return EmbeddingMatrix(data=data, ids=ids)


def generate_streaming(
    net: VelocityNet,
    stats: NormStats,
    n: int,
    config: SamplerConfig,
    path,
    *,
    id_base: int = 0,
    unit_norm: bool = False,
) -> None:
    """Stream n generated rows to an FPE1 file.

    Peak memory is one batch plus the model, independent of n; the file
    is byte-identical to saving :func:`generate` output with equal
    arguments. A partially written file is removed on I/O failure.
    """
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(FPE1_MAGIC, FPE1_VERSION, net.config.dim, n))
            ids = id_base + np.arange(n, dtype="<u8")
            f.write(ids.tobytes())
            del ids
            for _, rows in _generate_batches(net, stats, n, config, unit_norm):
                f.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())
    except BaseException:
        path.unlink(missing_ok=True)
        raise
