"""Time-conditioned MLP velocity network and its checkpoint format.

The network maps a batch of vectors plus a per-row time scalar in [0, 1]
to velocity predictions of the same shape. Each hidden block applies
adaptive layer normalization driven by a sinusoidal time embedding,
a GELU MLP, and a residual connection.

Checkpoints are a JSON manifest (architecture, tensor table, training
metadata) plus a raw little-endian float32 blob; round-trips are
bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import FormatError, NumericError
from .store import NormStats

LAYERNORM_EPS = 1e-5
TIME_PHASE_SCALE = 1000.0
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FlowNetConfig:
    """Architecture hyperparameters of the velocity network."""

    dim: int = 128
    time_dim: int = 32
    width: int = 768
    expansion: int = 3072
    depth: int = 12

    def __post_init__(self):
        for name in ("dim", "time_dim", "width", "expansion", "depth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.expansion < self.width:
            raise ValueError("expansion must be at least width")
        if self.time_dim % 2 != 0:
            raise ValueError("time_dim must be even")


def time_embedding(t: torch.Tensor, time_dim: int) -> torch.Tensor:
    """Sinusoidal embedding of diffusion times.

    Concatenates sin and cos of (1000 * t) * omega_k with geometric
    frequencies omega_k = exp(-k * ln(10000) / (time_dim/2 - 1)).

    Args:
        t: shape (n,), values in [0, 1].
        time_dim: even embedding width.

    Returns:
        Tensor of shape (n, time_dim) with components in [-1, 1].
    """
    if time_dim % 2 != 0:
        raise ValueError("time_dim must be even")
    if t.dim() != 1:
        raise ValueError(f"t must be 1-D, got shape {tuple(t.shape)}")
    if t.numel() and (t.min() < 0 or t.max() > 1):
        raise ValueError("diffusion times must lie in [0, 1]")
    half = time_dim // 2
    k = torch.arange(half, dtype=t.dtype, device=t.device)
    if half > 1:
        omega = torch.exp(-k * (math.log(10000.0) / (half - 1)))
    else:
        omega = torch.ones_like(k)
    phase = (TIME_PHASE_SCALE * t)[:, None] * omega[None, :]
    return torch.cat([torch.sin(phase), torch.cos(phase)], dim=-1)


def adaln(h: torch.Tensor, temb: torch.Tensor, mod_proj: nn.Linear) -> torch.Tensor:
    """Adaptive layer norm: norm(h) * (1 + gamma) + beta.

    gamma and beta come from a linear projection of the time embedding;
    the norm itself carries no learned affine (epsilon 1e-5), so a
    zero-initialized projection reduces this to plain layer norm.
    """
    mod = mod_proj(temb)
    gamma, beta = mod.chunk(2, dim=-1)
    normed = F.layer_norm(h, (h.shape[-1],), eps=LAYERNORM_EPS)
    return normed * (1 + gamma) + beta


class MlpBlock(nn.Module):
    def __init__(self, width: int, expansion: int, time_dim: int):
        super().__init__()
        self.mod = nn.Linear(time_dim, 2 * width)
        self.linear1 = nn.Linear(width, expansion)
        self.linear2 = nn.Linear(expansion, width)

    def forward(self, h: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        y = adaln(h, temb, self.mod)
        y = self.linear2(F.gelu(self.linear1(y)))
        return h + y


class VelocityNet(nn.Module):
    """The full velocity model; holds every trainable tensor plus its config."""

    def __init__(self, config: FlowNetConfig):
        super().__init__()
        self.config = config
        self.input_proj = nn.Linear(config.dim, config.width)
        self.blocks = nn.ModuleList(
            MlpBlock(config.width, config.expansion, config.time_dim)
            for _ in range(config.depth)
        )
        self.output_proj = nn.Linear(config.width, config.dim)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Predict velocities for a batch.

        Args:
            x: shape (n, dim), standardized inputs.
            t: shape (n,), diffusion times in [0, 1].
        """
        if x.dim() != 2 or x.shape[1] != self.config.dim:
            raise ValueError(
                f"expected input of shape (n, {self.config.dim}), got {tuple(x.shape)}"
            )
        if t.shape != (x.shape[0],):
            raise ValueError(
                f"expected {x.shape[0]} time values, got shape {tuple(t.shape)}"
            )
        temb = time_embedding(t, self.config.time_dim)
        h = self.input_proj(x)
        for i, block in enumerate(self.blocks):
            h = block(h, temb)
            if not torch.isfinite(h).all():
                raise NumericError(f"non-finite activations after block {i}")
        return self.output_proj(h)


def _seeded_linear_init(linear: nn.Linear, rng: np.random.Generator) -> None:
    fan_in = linear.in_features
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(linear.out_features, fan_in))
    b = rng.uniform(-bound, bound, size=linear.out_features)
    with torch.no_grad():
        linear.weight.copy_(torch.from_numpy(w.astype(np.float32)))
        linear.bias.copy_(torch.from_numpy(b.astype(np.float32)))


def init_params(config: FlowNetConfig, seed: int) -> VelocityNet:
    """Build a network with uniform fan-in init, zeroed AdaLN projections.

    The draw order is fixed, so a given seed always produces identical
    parameters regardless of library RNG state.
    """
    net = VelocityNet(config)
    rng = np.random.default_rng(seed)
    _seeded_linear_init(net.input_proj, rng)
    for block in net.blocks:
        with torch.no_grad():
            block.mod.weight.zero_()
            block.mod.bias.zero_()
        _seeded_linear_init(block.linear1, rng)
        _seeded_linear_init(block.linear2, rng)
    _seeded_linear_init(net.output_proj, rng)
    return net


def param_count(config: FlowNetConfig) -> int:
    """Closed-form number of trainable scalars for a config."""
    d, w, e, td = config.dim, config.width, config.expansion, config.time_dim
    in_proj = d * w + w
    block = (td * 2 * w + 2 * w) + (w * e + e) + (e * w + w)
    out_proj = w * d + d
    return in_proj + config.depth * block + out_proj


def save_checkpoint(net: VelocityNet, stats: NormStats, path, metadata: dict | None = None) -> None:
    """Write a checkpoint: JSON manifest at `path`, raw blob at `path + '.blob'`."""
    path = Path(path)
    blob_path = Path(str(path) + ".blob")
    tensors = []
    offset = 0
    chunks = []
    named = list(net.state_dict().items())
    named.append(("norm.mean", torch.from_numpy(np.array(stats.mean))))
    named.append(("norm.std", torch.from_numpy(np.array(stats.std))))
    for name, tensor in named:
        arr = tensor.detach().cpu().numpy().astype("<f4")
        chunks.append(arr.tobytes())
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    manifest = {
        "format": "flow-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(net.config),
        "blob": blob_path.name,
        "blob_bytes": offset,
        "tensors": tensors,
        "metadata": metadata or {},
    }
    blob_path.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_checkpoint(path) -> tuple[VelocityNet, NormStats, dict]:
    """Load a checkpoint written by :func:`save_checkpoint` (bit-exact)."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: cannot parse checkpoint manifest: {e}") from e
    if manifest.get("format") != "flow-checkpoint":
        raise FormatError(f"{path}: not a flow checkpoint manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version")
    blob_path = path.parent / manifest["blob"]
    blob = blob_path.read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise FormatError(
            f"{blob_path}: blob is {len(blob)} bytes, manifest says {manifest['blob_bytes']}"
        )
    config = FlowNetConfig(**manifest["config"])
    net = VelocityNet(config)
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(shape).copy()
    state = {}
    for name in net.state_dict():
        if name not in arrays:
            raise FormatError(f"{path}: checkpoint is missing tensor {name!r}")
        state[name] = torch.from_numpy(arrays[name])
    net.load_state_dict(state)
    stats = NormStats(mean=arrays["norm.mean"], std=arrays["norm.std"])
    return net, stats, manifest.get("metadata", {})
