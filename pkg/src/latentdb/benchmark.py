"""Retrieval scaling experiments.

A sweep fixes a reference set and a query set, grows the database with
increasing numbers of distractors (drawn from a real pool or from the
generative model), and records the top-1 hit rate over several
independently resampled trials per size. Degradation summarizes the
relative HR@1 drop between two scales.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .ann import IvfPqConfig, SearchResult, add, exact_search, search, train_index
from .flownet import VelocityNet
from .sampler import SamplerConfig, generate
from .store import EmbeddingMatrix, NormStats, QuerySet, sample_rows

REPORT_SCHEMA = 1
GENERATED_ID_BASE = 1 << 40


@dataclass(frozen=True)
class SweepConfig:
    """Distractor sweep layout; `index=None` means exact (brute-force) search."""

    distractor_sizes: tuple
    trials: int = 5
    trial_seed_base: int = 0
    index: IvfPqConfig | None = None
    distractor_source: str = "real-pool"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.distractor_sizes)
        if len(sizes) == 0:
            raise ValueError("at least one distractor size is required")
        if any(s < 0 for s in sizes):
            raise ValueError("distractor sizes must be non-negative")
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("distractor sizes must be strictly ascending")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        object.__setattr__(self, "distractor_sizes", sizes)


@dataclass
class SizeEntry:
    n_distractors: int
    hr1_mean: float
    hr1_std: float
    hr1_trials: list


@dataclass
class ScalingReport:
    sizes: list
    metadata: dict = field(default_factory=dict)


def hr_at_1(results: SearchResult, truth: dict) -> float:
    """Fraction of queries whose top-ranked id equals the ground truth."""
    hits = 0
    for i, qid in enumerate(results.query_ids.tolist()):
        if qid not in truth:
            raise ValueError(f"query id {qid} has no ground-truth entry")
        if results.lengths[i] > 0 and int(results.ids[i, 0]) == int(truth[qid]):
            hits += 1
    return hits / results.query_ids.shape[0]


def perturb_queries(refs: EmbeddingMatrix, n: int, noise_sigma: float, seed: int) -> QuerySet:
    """Sample n references and add Gaussian noise scaled per dimension.

    The noise std in dimension i is noise_sigma times the references'
    empirical std in that dimension; this stands in for acoustic query
    distortions, which are outside this artifact.
    """
    if n > refs.count:
        raise ValueError(f"cannot draw {n} queries from {refs.count} references")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(refs.count)[:n]
    scale = refs.data.std(axis=0) * np.float32(noise_sigma)
    noise = rng.standard_normal((n, refs.dim)).astype(np.float32) * scale
    data = refs.data[idx] + noise
    qids = np.arange(n, dtype=np.uint64)
    truth = {int(q): int(refs.ids[i]) for q, i in zip(qids, idx)}
    return QuerySet(queries=EmbeddingMatrix(data=data, ids=qids), truth=truth)


def pool_source(pool: EmbeddingMatrix):
    """Distractor source drawing without replacement from a real pool."""

    def draw(n: int, seed: int) -> EmbeddingMatrix:
        return sample_rows(pool, n, seed)

    return draw


def generator_source(
    net: VelocityNet,
    stats: NormStats,
    config: SamplerConfig,
    id_base: int = GENERATED_ID_BASE,
):
    """Distractor source sampling fresh rows from a trained flow model."""

    def draw(n: int, seed: int) -> EmbeddingMatrix:
        return generate(net, stats, n, replace(config, seed=seed), id_base=id_base)

    return draw


def _concat(a: EmbeddingMatrix, b: EmbeddingMatrix | None) -> EmbeddingMatrix:
    if b is None or b.count == 0:
        return a
    return EmbeddingMatrix(
        data=np.concatenate([a.data, b.data], axis=0),
        ids=np.concatenate([a.ids, b.ids]),
    )


def _trial_seed(base: int, size: int, trial: int) -> int:
    return int(np.random.SeedSequence([base, size, trial]).generate_state(1)[0])


def run_sweep(refs: EmbeddingMatrix, queries: QuerySet, sweep: SweepConfig, source) -> ScalingReport:
    """Run the full distractor sweep and aggregate HR@1 per size.

    `source(n, seed)` supplies distractor matrices. With an index config,
    the coarse quantizer is trained once per size on refs plus the first
    trial's distractors and reused across that size's trials; each trial
    populates a fresh index. Distractor ids must not collide with
    reference ids.
    """
    ref_ids = {int(i) for i in refs.ids}
    missing = [t for t in queries.truth.values() if t not in ref_ids]
    if missing:
        raise ValueError(f"truth targets missing from references: {missing[:5]}")

    entries = []
    for size in sweep.distractor_sizes:
        trial_hr = []
        first_distractors = source(size, _trial_seed(sweep.trial_seed_base, size, 0)) if size else None
        trained = None
        if sweep.index is not None:
            trained = train_index(sweep.index, _concat(refs, first_distractors))
        for trial in range(sweep.trials):
            if size == 0:
                distractors = None
            elif trial == 0:
                distractors = first_distractors
            else:
                distractors = source(size, _trial_seed(sweep.trial_seed_base, size, trial))
            if sweep.index is None:
                db = _concat(refs, distractors)
                result = exact_search(db, queries.queries, 1)
            else:
                idx = trained.clone_trained()
                add(idx, refs)
                if distractors is not None:
                    add(idx, distractors)
                result = search(idx, queries.queries, 1)
            trial_hr.append(hr_at_1(result, queries.truth))
        entries.append(
            SizeEntry(
                n_distractors=int(size),
                hr1_mean=float(np.mean(trial_hr)),
                hr1_std=float(np.std(trial_hr)),
                hr1_trials=[float(h) for h in trial_hr],
            )
        )
    metadata = {
        "source": sweep.distractor_source,
        "trials": sweep.trials,
        "trial_seed_base": sweep.trial_seed_base,
        "search": "exact" if sweep.index is None else "ivf-pq",
        "index_config": None if sweep.index is None else asdict(sweep.index),
        "n_references": refs.count,
        "n_queries": queries.queries.count,
    }
    return ScalingReport(sizes=entries, metadata=metadata)


def degradation(hr_small: float, hr_large: float) -> float:
    """Percentage HR@1 drop from a smaller to a larger database."""
    if hr_small <= 0:
        raise ValueError("degradation is undefined when the baseline hit rate is 0")
    return 100.0 * (hr_small - hr_large) / hr_small


def calibrate_noise_sigma(
    refs: EmbeddingMatrix,
    n_queries: int,
    target: float = 0.9,
    seed: int = 0,
    iters: int = 24,
) -> float:
    """Find a noise_sigma whose no-distractor exact-search HR@1 is near target."""

    def hr(sigma: float) -> float:
        qs = perturb_queries(refs, n_queries, sigma, seed)
        return hr_at_1(exact_search(refs, qs.queries, 1), qs.truth)

    lo, hi = 0.0, 0.25
    while hr(hi) > target:
        hi *= 2.0
        if hi > 64:
            raise ValueError("could not find a noise level below the target hit rate")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if hr(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def report_to_dict(report: ScalingReport) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "metadata": report.metadata,
        "sizes": [
            {
                "n_distractors": e.n_distractors,
                "hr1_mean": e.hr1_mean,
                "hr1_std": e.hr1_std,
                "hr1_trials": e.hr1_trials,
            }
            for e in report.sizes
        ],
    }


def report_from_dict(doc: dict) -> ScalingReport:
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"unsupported report schema {doc.get('schema')!r}")
    sizes = [
        SizeEntry(
            n_distractors=int(e["n_distractors"]),
            hr1_mean=float(e["hr1_mean"]),
            hr1_std=float(e["hr1_std"]),
            hr1_trials=[float(v) for v in e["hr1_trials"]],
        )
        for e in doc["sizes"]
    ]
    return ScalingReport(sizes=sizes, metadata=doc.get("metadata", {}))


def emit_report(report: ScalingReport, json_path, csv_path=None) -> None:
    """Write the report as JSON (full fidelity) plus a plotting-friendly CSV."""
    json_path = Path(json_path)
    if csv_path is None:
        csv_path = json_path.with_suffix(".csv")
    json_path.write_text(json.dumps(report_to_dict(report), sort_keys=True, indent=1))
    trials = max((len(e.hr1_trials) for e in report.sizes), default=0)
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["n_distractors", "hr1_mean", "hr1_std"] + [f"trial_{i}" for i in range(trials)]
        )
        for e in report.sizes:
            writer.writerow(
                [e.n_distractors, repr(e.hr1_mean), repr(e.hr1_std)]
                + [repr(v) for v in e.hr1_trials]
            )


def load_report(json_path) -> ScalingReport:
    return report_from_dict(json.loads(Path(json_path).read_text()))
