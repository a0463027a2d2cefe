"""Distribution-fidelity metrics between embedding sets.

Fréchet distance uses the squared (FID-style) convention on fitted
Gaussian moments. Jensen-Shannon divergence is estimated in nats after
projecting both sets onto the top principal components of the first:
each projected set gets a diagonal Gaussian KDE (per-dimension Scott
bandwidth) and JS is a seeded Monte Carlo average over samples drawn
from the two KDEs, clamped to [0, ln 2].
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import NumericError
from .store import EmbeddingMatrix

logger = logging.getLogger(__name__)

KDE_VARIANCE_FLOOR = 1e-9
_SYMMETRY_TOL = 1e-6


@dataclass(frozen=True)
class GaussianMoments:
    """Empirical mean vector and covariance matrix of one embedding set."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        cov = np.ascontiguousarray(self.covariance, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError("mean must be (d,), covariance (d, d)")
        if np.abs(cov - cov.T).max(initial=0.0) >= _SYMMETRY_TOL:
            raise ValueError("covariance must be symmetric")
        if np.diag(cov).min(initial=0.0) < -_SYMMETRY_TOL:
            raise ValueError("covariance diagonal must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def moments(m: EmbeddingMatrix) -> GaussianMoments:
    """Empirical mean and covariance (n-1 denominator, symmetrized)."""
    if m.count < 2:
        raise ValueError(f"need at least 2 rows for moments, got {m.count}")
    x = m.data.astype(np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (m.count - 1)
    cov = 0.5 * (cov + cov.T)
    return GaussianMoments(mean=mean, covariance=cov)


def _sqrtm_psd(c: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0."""
    try:
        vals, vecs = np.linalg.eigh(c)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"eigendecomposition failed: {e}") from e
    vals = np.maximum(vals, 0.0)
    root = (vecs * np.sqrt(vals)) @ vecs.T
    return 0.5 * (root + root.T)


def frechet_distance(a: GaussianMoments, b: GaussianMoments) -> float:
    """Squared Fréchet distance between two fitted Gaussians.

    ||mu_a - mu_b||^2 + tr(C_a + C_b - 2 (C_a^1/2 C_b C_a^1/2)^1/2).
    """
    if a.dim != b.dim:
        raise ValueError(f"dim mismatch: {a.dim} vs {b.dim}")
    root_a = _sqrtm_psd(a.covariance)
    inner = root_a @ b.covariance @ root_a
    inner = 0.5 * (inner + inner.T)
    try:
        vals = np.linalg.eigvalsh(inner)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"eigendecomposition failed: {e}") from e
    cross = np.sqrt(np.maximum(vals, 0.0)).sum()
    mean_term = float(np.sum((a.mean - b.mean) ** 2))
    trace_term = float(np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * cross)
    return max(mean_term + trace_term, 0.0)


@dataclass(frozen=True)
class PcaBasis:
    """Top-k principal directions of a reference set."""

    components: np.ndarray
    center: np.ndarray
    explained_variance: np.ndarray

    def __post_init__(self):
        comps = np.ascontiguousarray(self.components, dtype=np.float64)
        center = np.ascontiguousarray(self.center, dtype=np.float64)
        ev = np.ascontiguousarray(self.explained_variance, dtype=np.float64)
        k, d = comps.shape
        if center.shape != (d,) or ev.shape != (k,):
            raise ValueError("inconsistent basis shapes")
        gram = comps @ comps.T
        if np.abs(gram - np.eye(k)).max() > 1e-5:
            raise ValueError("components must be orthonormal")
        if (np.diff(ev) > 1e-12).any() or (ev < 0).any():
            raise ValueError("explained variances must be non-negative and non-increasing")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "explained_variance", ev)

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(m: EmbeddingMatrix, k: int) -> PcaBasis:
    """Top-k right singular vectors of the centered data.

    Sign convention: the largest-magnitude entry of each component is
    positive.
    """
    if k < 1 or k > min(m.dim, m.count - 1):
        raise ValueError(f"k={k} must be in [1, min(dim, count-1)] = "
                         f"[1, {min(m.dim, m.count - 1)}]")
    x = m.data.astype(np.float64)
    center = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - center, full_matrices=False)
    comps = vt[:k].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    ev = (s[:k] ** 2) / (m.count - 1)
    return PcaBasis(components=comps, center=center, explained_variance=ev)


def pca_project(basis: PcaBasis, m: EmbeddingMatrix) -> np.ndarray:
    if m.dim != basis.center.shape[0]:
        raise ValueError(f"dim mismatch: {m.dim} vs basis {basis.center.shape[0]}")
    return (m.data.astype(np.float64) - basis.center) @ basis.components.T


class _DiagonalKde:
    """Gaussian product-kernel KDE with per-dimension Scott bandwidth."""

    def __init__(self, points: np.ndarray):
        n, k = points.shape
        var = points.var(axis=0)
        if (var < KDE_VARIANCE_FLOOR).any():
            logger.warning(
                "KDE variance floor applied to %d of %d projected dimensions",
                int((var < KDE_VARIANCE_FLOOR).sum()), k,
            )
            var = np.maximum(var, KDE_VARIANCE_FLOOR)
        factor = n ** (-1.0 / (k + 4))
        self.points = points
        self.bandwidth = np.sqrt(var) * factor
        self._log_norm = (
            -np.log(n) - 0.5 * k * math.log(2 * math.pi) - np.log(self.bandwidth).sum()
        )
        self._scaled = points / self.bandwidth
        self._scaled_sq = (self._scaled**2).sum(axis=1)

    def logpdf(self, x: np.ndarray, chunk: int = 2048) -> np.ndarray:
        out = np.empty(x.shape[0])
        xs = x / self.bandwidth
        for lo in range(0, x.shape[0], chunk):
            part = xs[lo : lo + chunk]
            d2 = (
                (part**2).sum(axis=1)[:, None]
                + self._scaled_sq[None, :]
                - 2.0 * part @ self._scaled.T
            )
            out[lo : lo + chunk] = logsumexp(-0.5 * d2, axis=1)
        return out + self._log_norm

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(self.points.shape[0], size=count)
        jitter = rng.standard_normal((count, self.points.shape[1]))
        return self.points[idx] + jitter * self.bandwidth


def _js_kde_raw(
    real: EmbeddingMatrix,
    other: EmbeddingMatrix,
    k: int,
    eval_samples: int,
    seed: int,
) -> float:
    if real.count == 0 or other.count == 0:
        raise ValueError("both sets must be nonempty")
    if k > real.dim:
        raise ValueError(f"k={k} exceeds dim={real.dim}")
    basis = pca_fit(real, k)
    kde_p = _DiagonalKde(pca_project(basis, real))
    kde_q = _DiagonalKde(pca_project(basis, other))
    rng = np.random.default_rng(seed)
    xp = kde_p.sample(eval_samples, rng)
    xq = kde_q.sample(eval_samples, rng)
    log2 = math.log(2.0)

    def _mean_term(x, own, opposite):
        lo = own.logpdf(x)
        lm = np.logaddexp(lo, opposite.logpdf(x)) - log2
        return float(np.mean(lo - lm))

    return 0.5 * _mean_term(xp, kde_p, kde_q) + 0.5 * _mean_term(xq, kde_q, kde_p)


def js_divergence_kde(
    real: EmbeddingMatrix,
    other: EmbeddingMatrix,
    k: int = 20,
    eval_samples: int = 20000,
    seed: int = 0,
) -> float:
    """Monte Carlo JS divergence (nats) between two sets after PCA.

    The PCA basis is fitted on `real`; both sets are projected onto it
    before KDE fitting. The estimate is clamped to [0, ln 2].
    """
    raw = _js_kde_raw(real, other, k, eval_samples, seed)
    return min(max(raw, 0.0), math.log(2.0))


def export_projection_2d(
    real: EmbeddingMatrix,
    synthetic: EmbeddingMatrix,
    noise: EmbeddingMatrix,
):
    """Project three sets onto the top-2 PCA components of `real`.

    Returns (coords, labels): an (N, 2) float array and a matching list
    of labels from {"real", "synthetic", "noise"}.
    """
    if not (real.dim == synthetic.dim == noise.dim):
        raise ValueError("all three sets must share one dimensionality")
    basis = pca_fit(real, 2)
    coords = np.concatenate(
        [pca_project(basis, part) for part in (real, synthetic, noise)], axis=0
    )
    labels = (
        ["real"] * real.count + ["synthetic"] * synthetic.count + ["noise"] * noise.count
    )
    return coords, labels


def write_projection_csv(path, coords: np.ndarray, labels) -> None:
    with open(Path(path), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "label"])
        for (x, y), label in zip(coords, labels):
            writer.writerow([repr(float(x)), repr(float(y)), label])
