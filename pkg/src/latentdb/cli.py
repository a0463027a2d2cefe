"""Command-line entry point.

Subcommands: train, sample, fidelity, index build|search, benchmark,
make-fixtures. A JSON run-configuration file may supply any option;
explicit command-line flags override file values, which override
built-in defaults. Exit codes: 0 success, 2 usage/input error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import benchmark as bench
from . import fidelity, fixtures
from .ann import IvfPqConfig, add, deserialize_index, search, serialize_index, train_index
from .errors import FormatError, NumericError, TrainingDiverged
from .flownet import FlowNetConfig, VelocityNet, load_checkpoint, save_checkpoint
from .sampler import SamplerConfig, generate_streaming
from .store import (
    EmbeddingMatrix,
    QuerySet,
    load_embeddings,
    save_embeddings,
    save_norm_stats,
)
from .trainer import TrainConfig, train

logger = logging.getLogger(__name__)


def _load_run_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read run config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise FormatError(f"run config {path} must be a JSON object")
    return doc


class _Options:
    """Flag > config-file section > default resolution."""

    def __init__(self, args: argparse.Namespace, section: str):
        doc = _load_run_config(getattr(args, "config", None))
        self._args = args
        self._section = doc.get(section, {})
        self._global = doc

    def get(self, key: str, default=None):
        v = getattr(self._args, key.replace("-", "_"), None)
        if v is not None:
            return v
        if key in self._section:
            return self._section[key]
        if key in ("seed",) and key in self._global:
            return self._global[key]
        return default


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _flow_config(opts: _Options, dim: int) -> FlowNetConfig:
    return FlowNetConfig(
        dim=dim,
        time_dim=int(opts.get("time-dim", 32)),
        width=int(opts.get("width", 768)),
        expansion=int(opts.get("expansion", 3072)),
        depth=int(opts.get("depth", 12)),
    )


def _index_config(opts: _Options) -> IvfPqConfig:
    return IvfPqConfig(
        nlist=int(opts.get("nlist", 256)),
        m=int(opts.get("m", 16)),
        nprobe=int(opts.get("nprobe", 32)),
        metric=str(opts.get("metric", "l2")),
        kmeans_iters=int(opts.get("kmeans-iters", 25)),
        train_seed=int(opts.get("train-seed", opts.get("seed", 0))),
    )


def cmd_train(args) -> int:
    opts = _Options(args, "train")
    corpus = load_embeddings(_require_file(args.corpus, "corpus"))
    config = TrainConfig(
        epochs=int(opts.get("epochs", 100)),
        batch_size=int(opts.get("batch-size", 512)),
        lr_max=float(opts.get("lr-max", 5e-5)),
        lr_min=float(opts.get("lr-min", 1e-6)),
        weight_decay=float(opts.get("weight-decay", 0.01)),
        seed=int(opts.get("seed", 0)),
        validate_every=int(opts.get("validate-every", 10)),
        validation_sample_count=int(opts.get("validation-samples", 4096)),
    )
    flow_config = _flow_config(opts, corpus.dim)
    out = Path(args.out)
    log_path = Path(opts.get("log", str(out) + ".log.jsonl"))
    try:
        result = train(
            corpus,
            config,
            flow_config,
            sampler_steps=int(opts.get("sampler-steps", 50)),
            checkpoint_path=out,
            log_path=log_path,
        )
    except TrainingDiverged as e:
        if e.params is not None:
            net = VelocityNet(flow_config)
            net.load_state_dict(e.params)
            save_checkpoint(net, e.stats, out, metadata={"diverged": True, "seed": config.seed})
            save_norm_stats(e.stats, str(out) + ".stats.json")
        print(f"error: {e}", file=sys.stderr)
        return 3
    save_norm_stats(result.stats, str(out) + ".stats.json")
    final = result.log[-1]
    print(
        f"trained {config.epochs} epochs on {corpus.count} rows; "
        f"final mean loss {final['mean_loss']:.4f}; checkpoint {out}"
    )
    return 0


def cmd_sample(args) -> int:
    opts = _Options(args, "sample")
    net, stats, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    n = int(args.n)
    config = SamplerConfig(
        steps=int(opts.get("steps", 50)),
        batch_size=int(opts.get("batch-size", 8192)),
        seed=int(opts.get("seed", 0)),
    )
    started = time.perf_counter()
    generate_streaming(
        net, stats, n, config, args.out,
        id_base=int(opts.get("id-base", 0)),
        unit_norm=bool(args.unit_norm),
    )
    elapsed = time.perf_counter() - started
    print(f"generated {n} rows (T={config.steps}) to {args.out} "
          f"in {elapsed:.1f}s ({n / elapsed:.0f} rows/s)")
    return 0


def cmd_fidelity(args) -> int:
    opts = _Options(args, "fidelity")
    real = load_embeddings(_require_file(args.real, "real embeddings"))
    synthetic = load_embeddings(_require_file(args.synthetic, "synthetic embeddings"))
    if real.dim != synthetic.dim:
        raise ValueError(f"dim mismatch: real {real.dim} vs synthetic {synthetic.dim}")
    seed = int(opts.get("seed", 0))
    if args.noise is not None:
        noise = load_embeddings(_require_file(args.noise, "noise embeddings"))
    else:
        rng = np.random.default_rng(seed)
        noise = EmbeddingMatrix.from_array(
            rng.standard_normal((synthetic.count, real.dim)).astype(np.float32)
        )
    if noise.dim != real.dim:
        raise ValueError(f"dim mismatch: real {real.dim} vs noise {noise.dim}")
    k = int(opts.get("k", min(20, real.dim)))
    eval_samples = int(opts.get("eval-samples", 20000))
    metrics = {
        "fd": fidelity.frechet_distance(fidelity.moments(synthetic), fidelity.moments(real)),
        "js_vs_real": fidelity.js_divergence_kde(real, synthetic, k, eval_samples, seed),
        "js_vs_noise": fidelity.js_divergence_kde(synthetic, noise, k, eval_samples, seed),
        "k": k,
        "eval_samples": eval_samples,
        "seed": seed,
    }
    out = json.dumps(metrics, sort_keys=True, indent=1)
    if args.out is not None:
        Path(args.out).write_text(out)
    print(out)
    if args.projection_csv is not None:
        coords, labels = fidelity.export_projection_2d(real, synthetic, noise)
        fidelity.write_projection_csv(args.projection_csv, coords, labels)
    return 0


def cmd_index_build(args) -> int:
    opts = _Options(args, "index")
    vectors = load_embeddings(_require_file(args.input, "input embeddings"))
    config = _index_config(opts)
    index = train_index(config, vectors)
    add(index, vectors)
    serialize_index(index, args.out)
    print(f"indexed {index.ntotal} vectors into {config.nlist} lists at {args.out}")
    return 0


def cmd_index_search(args) -> int:
    opts = _Options(args, "index")
    index = deserialize_index(_require_file(args.index, "index"))
    queries = load_embeddings(_require_file(args.queries, "queries"))
    if args.nprobe is not None:
        index.config = replace(index.config, nprobe=int(args.nprobe))
    result = search(index, queries, int(opts.get("k", 10)))
    rows = []
    for i in range(result.query_ids.shape[0]):
        c = int(result.lengths[i])
        rows.append(
            {
                "query_id": int(result.query_ids[i]),
                "ids": [int(v) for v in result.ids[i, :c]],
                "distances": [float(v) for v in result.distances[i, :c]],
            }
        )
    out = json.dumps(rows, indent=1)
    if args.out is not None:
        Path(args.out).write_text(out)
    else:
        print(out)
    return 0


def _benchmark_queries(opts, args, refs) -> QuerySet:
    if args.queries is not None:
        queries = load_embeddings(_require_file(args.queries, "queries"))
        truth_doc = json.loads(_require_file(args.truth, "truth map").read_text())
        truth = {int(k): int(v) for k, v in truth_doc.items()}
        return QuerySet(queries=queries, truth=truth)
    n = int(opts.get("query-count", 500))
    seed = int(opts.get("query-seed", 1))
    sigma = opts.get("noise-sigma")
    if sigma is None:
        sigma = bench.calibrate_noise_sigma(refs, n, target=0.9, seed=seed)
        logger.info("calibrated noise_sigma=%.4f for HR@1~0.9", sigma)
    return bench.perturb_queries(refs, n, float(sigma), seed)


def cmd_benchmark(args) -> int:
    opts = _Options(args, "benchmark")
    refs = load_embeddings(_require_file(args.refs, "references"))
    queries = _benchmark_queries(opts, args, refs)

    if args.pool is not None:
        pool = load_embeddings(_require_file(args.pool, "distractor pool"))
        source = bench.pool_source(pool)
        source_name = "real-pool"
    elif args.checkpoint is not None:
        net, stats, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
        sampler_config = SamplerConfig(
            steps=int(opts.get("sampler-steps", 50)),
            batch_size=int(opts.get("sample-batch-size", 8192)),
        )
        source = bench.generator_source(net, stats, sampler_config)
        source_name = "generator"
    else:
        raise ValueError("a distractor source is required: --pool or --checkpoint")

    sizes = tuple(int(s) for s in str(opts.get("sizes", "0,1000,10000")).split(","))
    sweep = bench.SweepConfig(
        distractor_sizes=sizes,
        trials=int(opts.get("trials", 5)),
        trial_seed_base=int(opts.get("seed", 0)),
        index=None if args.exact else _index_config(opts),
        distractor_source=source_name,
    )
    report = bench.run_sweep(refs, queries, sweep, source)
    bench.emit_report(report, args.out)
    first, last = report.sizes[0], report.sizes[-1]
    if first.hr1_mean > 0:
        drop = bench.degradation(first.hr1_mean, last.hr1_mean)
        print(
            f"HR@1 {first.hr1_mean:.4f} @ {first.n_distractors} -> "
            f"{last.hr1_mean:.4f} @ {last.n_distractors} distractors "
            f"(degradation {drop:.2f}%)"
        )
    else:
        print("HR@1 baseline is 0; degradation undefined")
    print(f"report written to {args.out}")
    return 0


def cmd_make_fixtures(args) -> int:
    paths = fixtures.write_fixture_set(args.out)
    for role, path in sorted(paths.items()):
        print(f"{role}: {path}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run-configuration file (flags override it)")
    p.add_argument("--seed", type=int, help="global seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentdb",
        description="Generative distractor synthesis and retrieval scaling benchmarks.",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="worker thread cap (also env LDB_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true", help="verbose logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a flow model on an FPE1 corpus")
    p.add_argument("corpus", help="FPE1 corpus file")
    p.add_argument("--out", required=True, help="checkpoint manifest path")
    p.add_argument("--epochs", type=int, help="training epochs (default 100)")
    p.add_argument("--batch-size", type=int, help="mini-batch size (default 512)")
    p.add_argument("--lr-max", type=float, help="peak learning rate (default 5e-5)")
    p.add_argument("--lr-min", type=float, help="final learning rate (default 1e-6)")
    p.add_argument("--weight-decay", type=float, help="AdamW weight decay (default 0.01)")
    p.add_argument("--validate-every", type=int, help="epochs between FD validations (default 10)")
    p.add_argument("--validation-samples", type=int, help="samples per FD validation (default 4096)")
    p.add_argument("--width", type=int, help="hidden width (default 768)")
    p.add_argument("--expansion", type=int, help="hidden expansion (default 3072)")
    p.add_argument("--depth", type=int, help="MLP blocks (default 12)")
    p.add_argument("--time-dim", type=int, help="time embedding width (default 32)")
    p.add_argument("--sampler-steps", type=int, help="Euler steps for validation sampling (default 50)")
    p.add_argument("--log", help="JSONL training log path (default <out>.log.jsonl)")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="stream generated vectors to an FPE1 file")
    p.add_argument("checkpoint", help="checkpoint manifest path")
    p.add_argument("-n", type=int, required=True, help="number of rows to generate")
    p.add_argument("--out", required=True, help="output FPE1 path")
    p.add_argument("-T", "--steps", type=int, dest="steps", help="Euler steps (default 50)")
    p.add_argument("--batch-size", type=int, help="generation batch size (default 8192)")
    p.add_argument("--id-base", type=int, help="first row id (default 0)")
    p.add_argument("--unit-norm", action="store_true", help="project rows to the unit sphere")
    _add_common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fidelity", help="distribution metrics between embedding sets")
    p.add_argument("--real", required=True, help="real embeddings (FPE1)")
    p.add_argument("--synthetic", required=True, help="synthetic embeddings (FPE1)")
    p.add_argument("--noise", help="noise embeddings (FPE1); default fresh N(0, I)")
    p.add_argument("--out", help="metrics JSON output path (also printed)")
    p.add_argument("--k", type=int, help="PCA components for JS (default min(20, dim))")
    p.add_argument("--eval-samples", type=int, help="Monte Carlo samples per side (default 20000)")
    p.add_argument("--projection-csv", help="optional 2-D PCA projection CSV")
    _add_common(p)
    p.set_defaults(func=cmd_fidelity)

    p = sub.add_parser("index", help="build or query an IVF-PQ index")
    isub = p.add_subparsers(dest="index_command", required=True)
    pb = isub.add_parser("build", help="train an index on an FPE1 file and add its vectors")
    pb.add_argument("--input", required=True, help="FPE1 vectors")
    pb.add_argument("--out", required=True, help="output index path")
    pb.add_argument("--nlist", type=int, help="coarse clusters (default 256)")
    pb.add_argument("--m", type=int, help="PQ subspaces (default 16)")
    pb.add_argument("--nprobe", type=int, help="clusters probed per query (default 32)")
    pb.add_argument("--metric", choices=["l2", "ip"], help="distance metric (default l2)")
    pb.add_argument("--kmeans-iters", type=int, help="Lloyd iterations (default 25)")
    pb.add_argument("--train-seed", type=int, help="quantizer training seed")
    _add_common(pb)
    pb.set_defaults(func=cmd_index_build)
    ps = isub.add_parser("search", help="query a serialized index")
    ps.add_argument("--index", required=True, help="index file")
    ps.add_argument("--queries", required=True, help="FPE1 query vectors")
    ps.add_argument("--k", type=int, help="results per query (default 10)")
    ps.add_argument("--nprobe", type=int, help="override stored nprobe")
    ps.add_argument("--out", help="results JSON path (default stdout)")
    _add_common(ps)
    ps.set_defaults(func=cmd_index_search)

    p = sub.add_parser("benchmark", help="distractor scaling sweep")
    p.add_argument("--refs", required=True, help="reference embeddings (FPE1)")
    p.add_argument("--queries", help="query embeddings (FPE1); needs --truth")
    p.add_argument("--truth", help="JSON map query id -> reference id")
    p.add_argument("--query-count", type=int, help="perturbed queries to draw (default 500)")
    p.add_argument("--query-seed", type=int, help="query sampling seed (default 1)")
    p.add_argument("--noise-sigma", type=float,
                   help="query noise scale; default calibrates HR@1~0.9")
    p.add_argument("--pool", help="real distractor pool (FPE1)")
    p.add_argument("--checkpoint", help="flow checkpoint for generated distractors")
    p.add_argument("--sizes", help="comma-separated distractor counts (default 0,1000,10000)")
    p.add_argument("--trials", type=int, help="trials per size (default 5)")
    p.add_argument("--exact", action="store_true", help="brute-force search instead of IVF-PQ")
    p.add_argument("--nlist", type=int, help="coarse clusters (default 256)")
    p.add_argument("--m", type=int, help="PQ subspaces (default 16)")
    p.add_argument("--nprobe", type=int, help="clusters probed per query (default 32)")
    p.add_argument("--metric", choices=["l2", "ip"], help="distance metric (default l2)")
    p.add_argument("--kmeans-iters", type=int, help="Lloyd iterations (default 25)")
    p.add_argument("--train-seed", type=int, help="quantizer training seed")
    p.add_argument("--sampler-steps", type=int, help="Euler steps for generated distractors")
    p.add_argument("--sample-batch-size", type=int, help="generation batch size")
    p.add_argument("--out", required=True, help="report JSON path (CSV written alongside)")
    _add_common(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("make-fixtures", help=argparse.SUPPRESS)
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_make_fixtures)

    return parser


def _configure_threads(threads: int | None) -> None:
    if threads is None:
        env = os.environ.get("LDB_THREADS")
        threads = int(env) if env else None
    if threads is None:
        return
    if threads < 1:
        raise ValueError("--threads must be at least 1")
    import torch

    torch.set_num_threads(threads)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=threads)
    except ImportError:
        logger.debug("threadpoolctl unavailable; BLAS pool size unchanged")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _configure_threads(args.threads)
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (FormatError, FileNotFoundError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
