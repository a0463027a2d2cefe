"""Frozen synthetic desk corpus: an 8-component Gaussian mixture in 16-d.

Every split (training sets, references, distractor pool, held-out real
data) is drawn from the same frozen mixture with its own frozen seed, so
the whole evaluation pipeline is reproducible from this module alone.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .store import EmbeddingMatrix, save_embeddings

MIXTURE_DIM = 16
MIXTURE_COMPONENTS = 8
MIXTURE_PARAM_SEED = 7041


ROLE_SEEDS = {
    "train10k": 101,
    "train20k": 102,
    "heldout10k": 103,
    "refs1k": 104,
    "pool50k": 105,
}

ROLE_SIZES = {
    "train10k": 10_000,
    "train20k": 20_000,
    "heldout10k": 10_000,
    "refs1k": 1_000,
    "pool50k": 50_000,
}

# Disjoint id ranges so refs and pool can populate one index together.
ROLE_ID_BASES = {
    "train10k": 0,
    "train20k": 1_000_000,
    "heldout10k": 2_000_000,
    "refs1k": 3_000_000,
    "pool50k": 4_000_000,
}


def mixture_params():
    """Component means and stds of the frozen mixture."""
    rng = np.random.default_rng(MIXTURE_PARAM_SEED)
    means = rng.normal(0.0, 3.0, size=(MIXTURE_COMPONENTS, MIXTURE_DIM))
    stds = rng.uniform(0.35, 0.8, size=MIXTURE_COMPONENTS)
    return means.astype(np.float32), stds.astype(np.float32)


def make_mixture(n: int, seed: int, id_base: int = 0) -> EmbeddingMatrix:
    """Draw n rows from the frozen mixture with a per-split seed."""
    means, stds = mixture_params()
    rng = np.random.default_rng(seed)
    comp = rng.integers(MIXTURE_COMPONENTS, size=n)
    noise = rng.standard_normal((n, MIXTURE_DIM)).astype(np.float32)
    data = means[comp] + noise * stds[comp, None]
    ids = id_base + np.arange(n, dtype=np.uint64)
    return EmbeddingMatrix(data=data, ids=ids)


def make_role(role: str) -> EmbeddingMatrix:
    if role not in ROLE_SEEDS:
        raise ValueError(f"unknown fixture role {role!r}; choose from {sorted(ROLE_SEEDS)}")
    return make_mixture(ROLE_SIZES[role], ROLE_SEEDS[role], ROLE_ID_BASES[role])


def write_fixture_set(out_dir) -> dict:
    """Write every fixture split as an FPE1 file; returns role -> path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for role in ROLE_SEEDS:
        path = out_dir / f"{role}.fpe1"
        save_embeddings(make_role(role), path)
        paths[role] = path
    return paths
