"""Training of the velocity network on standardized embedding corpora.

The objective regresses the straight-line velocity between data and
Gaussian noise: for x_t = t*z + (1-t)*x the target is z - x, and the
loss is the mean squared error of the prediction. Optimization is
decoupled-weight-decay Adam with a per-step cosine learning-rate decay.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import NumericError, TrainingDiverged
from .flownet import FlowNetConfig, VelocityNet, init_params, save_checkpoint
from .store import EmbeddingMatrix, NormStats, compute_norm_stats, standardize_array


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 512
    lr_max: float = 5e-5
    lr_min: float = 1e-6
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    validate_every: int = 10
    validation_sample_count: int = 4096

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if self.validate_every < 1:
            raise ValueError("validate_every must be at least 1")


def _broadcast_t(t, x):
    if np.isscalar(t) or getattr(t, "ndim", 0) == 0:
        return t
    if t.ndim == 1 and x.ndim == 2:
        if t.shape[0] != x.shape[0]:
            raise ValueError(f"{t.shape[0]} time values for {x.shape[0]} rows")
        return t[:, None]
    return t


def rf_interpolate(x, z, t):
    """Straight-line point between data x (t=0) and noise z (t=1)."""
    if x.shape != z.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs z {z.shape}")
    t = _broadcast_t(t, x)
    return t * z + (1 - t) * x


def rf_velocity_target(x, z):
    """Velocity target of the data-to-noise interpolation: z - x."""
    if x.shape != z.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs z {z.shape}")
    return z - x


def _torch_dtype_to_numpy(dtype: torch.dtype):
    return np.float64 if dtype == torch.float64 else np.float32


def draw_flow_noise(rng: np.random.Generator, count: int, dim: int, dtype=np.float32):
    """Draw the per-row (z, t) pair used by the loss; z first, then t."""
    z = rng.standard_normal((count, dim)).astype(dtype, copy=False)
    t = rng.random(count).astype(dtype, copy=False)
    return z, t


def loss_given_noise(net: VelocityNet, x: torch.Tensor, z: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    x_t = rf_interpolate(x, z, t)
    v_target = rf_velocity_target(x, z)
    v_pred = net(x_t, t)
    return torch.mean((v_pred - v_target) ** 2)


def _loss_and_grads(net: VelocityNet, x: torch.Tensor, rng: np.random.Generator):
    z_np, t_np = draw_flow_noise(rng, x.shape[0], x.shape[1], _torch_dtype_to_numpy(x.dtype))
    z = torch.from_numpy(z_np)
    t = torch.from_numpy(t_np)
    loss = loss_given_noise(net, x, z, t)
    if not torch.isfinite(loss):
        raise NumericError("training loss is non-finite")
    names = [n for n, _ in net.named_parameters()]
    grads = torch.autograd.grad(loss, [p for _, p in net.named_parameters()])
    return float(loss.detach()), dict(zip(names, grads))


def rf_loss(net: VelocityNet, batch: EmbeddingMatrix, rng: np.random.Generator):
    """Flow-matching loss and parameter gradients for one standardized batch.

    Draws z ~ N(0, I) and t ~ U[0, 1] independently per row from `rng`
    (z before t), interpolates, and returns the mean squared velocity
    error together with gradients for every parameter.
    """
    if batch.count == 0:
        raise ValueError("batch must be nonempty")
    if batch.dim != net.config.dim:
        raise ValueError(f"batch dim {batch.dim} != model dim {net.config.dim}")
    x = torch.from_numpy(np.array(batch.data))
    return _loss_and_grads(net, x, rng)


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from lr_max at step 0 to lr_min at total_steps."""
    if total_steps < 1:
        raise ValueError("total_steps must be at least 1")
    if step < 0:
        raise ValueError("step must be non-negative")
    if step > total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamWState:
    """First/second-moment accumulators and the shared step counter."""

    exp_avg: dict
    exp_avg_sq: dict
    step: int = 0


def init_adamw_state(params: dict) -> AdamWState:
    return AdamWState(
        exp_avg={n: torch.zeros_like(p) for n, p in params.items()},
        exp_avg_sq={n: torch.zeros_like(p) for n, p in params.items()},
    )


def adamw_step(
    params: dict,
    grads: dict,
    state: AdamWState,
    lr: float,
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Weight decay multiplies parameters by (1 - lr*wd) before the Adam
    delta; moments use the standard bias correction.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1 - beta1 ** state.step
    bc2 = 1 - beta2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.exp_avg[name]
            v = state.exp_avg_sq[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            if weight_decay:
                p.mul_(1 - lr * weight_decay)
            denom = (v / bc2).sqrt_().add_(eps)
            p.sub_(lr * (m / bc1) / denom)


@dataclass
class TrainResult:
    net: VelocityNet
    stats: NormStats
    log: list = field(default_factory=list)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def train(
    corpus: EmbeddingMatrix,
    config: TrainConfig,
    flow_config: FlowNetConfig | None = None,
    *,
    sampler_steps: int = 50,
    checkpoint_path=None,
    log_path=None,
) -> TrainResult:
    """Train a velocity network on a corpus of raw embeddings.

    Holds out 5% of the rows (seeded) for validation, standardizes the
    rest with its own statistics, and runs seeded shuffled mini-batches.
    Every `validate_every` epochs it samples from the current model and
    logs the Fréchet distance against the held-out slice. Returns the
    final parameters, the normalization statistics used, and a per-epoch
    log; a fixed seed reproduces the run bit-exactly on one machine.
    """
    from .fidelity import frechet_distance, moments
    from .sampler import SamplerConfig, generate

    if flow_config is None:
        flow_config = FlowNetConfig(dim=corpus.dim)
    if corpus.dim != flow_config.dim:
        raise ValueError(f"corpus dim {corpus.dim} != model dim {flow_config.dim}")
    if corpus.count < config.batch_size:
        raise ValueError(
            f"corpus has {corpus.count} rows, need at least batch_size={config.batch_size}"
        )

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(corpus.count)
    val_count = max(2, round(0.05 * corpus.count))
    if corpus.count - val_count < config.batch_size:
        val_count = corpus.count - config.batch_size
    val_idx = perm[:val_count]
    train_idx = perm[val_count:]
    holdout = (
        EmbeddingMatrix(data=corpus.data[val_idx], ids=corpus.ids[val_idx])
        if val_count >= 2
        else None
    )
    train_rows = corpus.data[train_idx]

    stats = compute_norm_stats(EmbeddingMatrix.from_array(train_rows))
    x_all = standardize_array(train_rows, stats)

    net = init_params(flow_config, config.seed)
    params = dict(net.named_parameters())
    opt = init_adamw_state(params)

    batches_per_epoch = max(1, train_rows.shape[0] // config.batch_size)
    total_steps = config.epochs * batches_per_epoch

    log: list[dict] = []
    log_file = open(log_path, "w") if log_path is not None else None
    last_good = {n: p.detach().clone() for n, p in params.items()}

    def snapshot():
        for n, p in params.items():
            last_good[n].copy_(p.detach())
        if checkpoint_path is not None:
            save_checkpoint(net, stats, checkpoint_path, metadata=meta())

    def meta():
        return {"epoch": epoch + 1, "seed": config.seed, "train_rows": int(train_rows.shape[0])}

    epoch = -1
    try:
        gstep = 0
        for epoch in range(config.epochs):
            order = rng.permutation(x_all.shape[0])
            losses = []
            lr = config.lr_max
            for b in range(batches_per_epoch):
                idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                x = torch.from_numpy(x_all[idx])
                lr = cosine_lr(gstep, total_steps, config.lr_max, config.lr_min)
                loss, grads = _loss_and_grads(net, x, rng)
                adamw_step(
                    params,
                    grads,
                    opt,
                    lr,
                    beta1=config.adam_beta1,
                    beta2=config.adam_beta2,
                    eps=config.adam_eps,
                    weight_decay=config.weight_decay,
                )
                losses.append(loss)
                gstep += 1
            record = {"epoch": epoch + 1, "mean_loss": float(np.mean(losses)), "lr": lr}

            if holdout is not None and (epoch + 1) % config.validate_every == 0:
                sampled = generate(
                    net,
                    stats,
                    config.validation_sample_count,
                    SamplerConfig(
                        steps=sampler_steps,
                        batch_size=min(config.validation_sample_count, 8192),
                        seed=_derived_seed(config.seed, 0xFD, epoch + 1),
                    ),
                )
                record["fd"] = frechet_distance(moments(sampled), moments(holdout))
                snapshot()

            log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
    except NumericError as e:
        raise TrainingDiverged(
            f"training diverged at epoch {epoch + 1}: {e}",
            params=last_good,
            stats=stats,
            log=log,
        ) from e
    finally:
        if log_file is not None:
            log_file.close()

    if checkpoint_path is not None:
        save_checkpoint(net, stats, checkpoint_path, metadata=meta())
    return TrainResult(net=net, stats=stats, log=log)
