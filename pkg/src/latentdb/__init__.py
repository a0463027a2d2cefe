"""latentdb: synthetic latent-fingerprint generation and retrieval scaling.

Learns the distribution of embedding corpora with a rectified-flow
model, synthesizes arbitrarily large distractor databases, and measures
how approximate nearest-neighbour retrieval degrades as the database
grows.
"""

__version__ = "0.1.0"

from .store import (
    EmbeddingMatrix,
    NormStats,
    QuerySet,
    compute_norm_stats,
    destandardize,
    load_embeddings,
    sample_rows,
    save_embeddings,
    standardize,
)
from .flownet import FlowNetConfig, VelocityNet, init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train
from .sampler import SamplerConfig, euler_integrate, generate, generate_streaming
from .fidelity import frechet_distance, js_divergence_kde, moments, pca_fit
from .ann import IvfPqConfig, IvfPqIndex, add, exact_search, search, train_index
from .benchmark import ScalingReport, SweepConfig, degradation, hr_at_1, perturb_queries, run_sweep

__all__ = [
    "EmbeddingMatrix",
    "NormStats",
    "QuerySet",
    "compute_norm_stats",
    "standardize",
    "destandardize",
    "sample_rows",
    "save_embeddings",
    "load_embeddings",
    "FlowNetConfig",
    "VelocityNet",
    "init_params",
    "save_checkpoint",
    "load_checkpoint",
    "TrainConfig",
    "train",
    "SamplerConfig",
    "euler_integrate",
    "generate",
    "generate_streaming",
    "frechet_distance",
    "js_divergence_kde",
    "moments",
    "pca_fit",
    "IvfPqConfig",
    "IvfPqIndex",
    "train_index",
    "add",
    "search",
    "exact_search",
    "SweepConfig",
    "ScalingReport",
    "hr_at_1",
    "perturb_queries",
    "run_sweep",
    "degradation",
]
