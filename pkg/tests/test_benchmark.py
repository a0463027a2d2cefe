import csv
import json

import numpy as np
import pytest

from latentdb.ann import IvfPqConfig, SearchResult, exact_search
from latentdb.benchmark import (
    ScalingReport,
    SizeEntry,
    SweepConfig,
    calibrate_noise_sigma,
    degradation,
    emit_report,
    hr_at_1,
    load_report,
    perturb_queries,
    pool_source,
    report_from_dict,
    report_to_dict,
    run_sweep,
)
from latentdb.fixtures import make_mixture, make_role
from latentdb.store import EmbeddingMatrix, QuerySet


def matrix(data, id_base=0):
    data = np.asarray(data, dtype=np.float32)
    ids = id_base + np.arange(data.shape[0], dtype=np.uint64)
    return EmbeddingMatrix(data=data, ids=ids)


def result_of(query_ids, top_ids, lengths=None):
    n = len(query_ids)
    ids = np.full((n, 1), 2**64 - 1, dtype=np.uint64)
    for i, t in enumerate(top_ids):
        if t is not None:
            ids[i, 0] = t
    lengths = np.array(
        [1 if t is not None else 0 for t in top_ids] if lengths is None else lengths,
        dtype=np.int64,
    )
    return SearchResult(
        query_ids=np.array(query_ids, dtype=np.uint64),
        ids=ids,
        distances=np.zeros((n, 1), dtype=np.float32),
        lengths=lengths,
        metric="l2",
        k=1,
    )


class TestHrAt1:
    def test_all_correct(self):
        r = result_of([1, 2, 3], [11, 12, 13])
        assert hr_at_1(r, {1: 11, 2: 12, 3: 13}) == 1.0

    def test_half_correct(self):
        r = result_of([1, 2], [11, 99])
        assert hr_at_1(r, {1: 11, 2: 12}) == 0.5

    def test_zero_results_count_as_miss(self):
        r = result_of([1, 2], [11, None])
        assert hr_at_1(r, {1: 11, 2: 12}) == 0.5

    def test_missing_truth_names_query(self):
        r = result_of([1, 7], [11, 12])
        with pytest.raises(ValueError, match="7"):
            hr_at_1(r, {1: 11})

    def test_exact_copies_with_distractors_stay_perfect(self):
        refs = make_mixture(200, seed=50, id_base=0)
        distractors = make_mixture(2000, seed=51, id_base=10_000)
        qs = perturb_queries(refs, 50, 0.0, seed=3)
        db = EmbeddingMatrix(
            data=np.concatenate([refs.data, distractors.data]),
            ids=np.concatenate([refs.ids, distractors.ids]),
        )
        assert hr_at_1(exact_search(db, qs.queries, 1), qs.truth) == 1.0


class TestPerturbQueries:
    def test_zero_noise_copies_rows(self):
        refs = make_mixture(100, seed=52)
        qs = perturb_queries(refs, 20, 0.0, seed=1)
        by_id = {int(i): row for i, row in zip(refs.ids, refs.data)}
        for qid, row in zip(qs.queries.ids, qs.queries.data):
            assert np.array_equal(row, by_id[qs.truth[int(qid)]])

    def test_noise_scales_with_corpus_std(self):
        rng = np.random.default_rng(6)
        data = rng.standard_normal((4000, 2)).astype(np.float32) * np.array([1.0, 10.0], np.float32)
        refs = matrix(data)
        qs = perturb_queries(refs, 4000, 1.0, seed=2)
        by_id = {int(i): row for i, row in zip(refs.ids, refs.data)}
        deltas = np.stack([row - by_id[qs.truth[int(q)]] for q, row in zip(qs.queries.ids, qs.queries.data)])
        stds = deltas.std(axis=0)
        assert abs(stds[0] - 1.0) < 0.1
        assert abs(stds[1] - 10.0) < 1.0

    def test_large_noise_drops_to_chance(self):
        refs = make_mixture(10_000, seed=53)
        qs = perturb_queries(refs, 300, 5.0, seed=4)
        hr = hr_at_1(exact_search(refs, qs.queries, 1), qs.truth)
        assert hr < 0.05

    def test_oversample_rejected(self):
        refs = make_mixture(10, seed=54)
        with pytest.raises(ValueError, match="10"):
            perturb_queries(refs, 11, 0.1, seed=0)

    def test_deterministic(self):
        refs = make_mixture(100, seed=55)
        a = perturb_queries(refs, 10, 0.3, seed=9)
        b = perturb_queries(refs, 10, 0.3, seed=9)
        assert np.array_equal(a.queries.data, b.queries.data)
        assert a.truth == b.truth


class TestDegradation:
    @pytest.mark.parametrize(
        "small,large,expected",
        [(59.45, 37.77, 36.47), (57.64, 39.65, 31.21), (52.12, 23.32, 55.26), (69.11, 59.26, 14.25)],
    )
    def test_published_pairs(self, small, large, expected):
        assert degradation(small, large) == pytest.approx(expected, abs=0.01)

    def test_no_drop_is_zero(self):
        assert degradation(0.9, 0.9) == 0.0

    def test_zero_baseline_rejected(self):
        with pytest.raises(ValueError, match="undefined"):
            degradation(0.0, 0.0)


class TestRunSweep:
    def _setup(self):
        refs = make_role("refs1k")
        pool = make_role("pool50k")
        queries = perturb_queries(refs, 200, 0.15, seed=5)
        return refs, pool, queries

    def test_single_zero_size_matches_direct_hr(self):
        refs, pool, queries = self._setup()
        sweep = SweepConfig(distractor_sizes=(0,), trials=3, trial_seed_base=1)
        report = run_sweep(refs, queries, sweep, pool_source(pool))
        direct = hr_at_1(exact_search(refs, queries.queries, 1), queries.truth)
        entry = report.sizes[0]
        assert entry.hr1_trials == [direct] * 3
        assert entry.hr1_std == 0.0

    def test_deterministic(self):
        refs, pool, queries = self._setup()
        sweep = SweepConfig(distractor_sizes=(0, 500, 2000), trials=2, trial_seed_base=7)
        a = run_sweep(refs, queries, sweep, pool_source(pool))
        b = run_sweep(refs, queries, sweep, pool_source(pool))
        assert report_to_dict(a) == report_to_dict(b)

    def test_means_non_increasing_with_slack(self):
        refs, pool, queries = self._setup()
        sweep = SweepConfig(distractor_sizes=(0, 1000, 10000), trials=3, trial_seed_base=2)
        report = run_sweep(refs, queries, sweep, pool_source(pool))
        means = [e.hr1_mean for e in report.sizes]
        stds = [e.hr1_std for e in report.sizes]
        for i in range(len(means) - 1):
            assert means[i + 1] <= means[i] + max(stds[i], stds[i + 1]) + 1e-9

    def test_pool_exhaustion_is_explicit(self):
        refs, pool, queries = self._setup()
        sweep = SweepConfig(distractor_sizes=(60000,), trials=1, trial_seed_base=0)
        with pytest.raises(ValueError, match="50000"):
            run_sweep(refs, queries, sweep, pool_source(pool))

    def test_truth_targets_must_be_references(self):
        refs, pool, queries = self._setup()
        other = make_mixture(50, seed=60, id_base=9_000_000)
        qs = QuerySet(queries=queries.queries, truth={int(q): int(other.ids[0]) for q in queries.queries.ids})
        sweep = SweepConfig(distractor_sizes=(0,), trials=1)
        with pytest.raises(ValueError, match="missing from references"):
            run_sweep(refs, qs, sweep, pool_source(pool))

    def test_ivfpq_mode_runs_and_is_deterministic(self):
        refs = make_role("refs1k")
        pool = make_role("pool50k")
        queries = perturb_queries(refs, 100, 0.15, seed=5)
        index_cfg = IvfPqConfig(nlist=32, m=4, nprobe=16, kmeans_iters=8, train_seed=1)
        sweep = SweepConfig(distractor_sizes=(0, 500), trials=2, trial_seed_base=3, index=index_cfg)
        a = run_sweep(refs, queries, sweep, pool_source(pool))
        b = run_sweep(refs, queries, sweep, pool_source(pool))
        assert report_to_dict(a) == report_to_dict(b)
        assert all(0.0 <= e.hr1_mean <= 1.0 for e in a.sizes)
        assert a.metadata["search"] == "ivf-pq"


class TestCalibration:
    def test_hits_target_band(self):
        refs = make_role("refs1k")
        sigma = calibrate_noise_sigma(refs, 300, target=0.9, seed=1)
        qs = perturb_queries(refs, 300, sigma, seed=1)
        hr = hr_at_1(exact_search(refs, qs.queries, 1), qs.truth)
        assert 0.85 <= hr <= 0.95
        assert sigma > 0


class TestReports:
    def _report(self):
        return ScalingReport(
            sizes=[
                SizeEntry(0, 0.9, 0.0, [0.9, 0.9]),
                SizeEntry(1000, 0.8123456789, 0.012345, [0.8, 0.8246913578]),
            ],
            metadata={"source": "real-pool", "trials": 2},
        )

    def test_json_roundtrip_identical(self, tmp_path):
        report = self._report()
        path = tmp_path / "report.json"
        emit_report(report, path)
        loaded = load_report(path)
        assert report_to_dict(loaded) == report_to_dict(report)

    def test_csv_layout_and_precision(self, tmp_path):
        report = self._report()
        path = tmp_path / "report.json"
        emit_report(report, path)
        with open(tmp_path / "report.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["n_distractors", "hr1_mean", "hr1_std", "trial_0", "trial_1"]
        assert len(rows) == 3
        doc = json.loads(path.read_text())
        for row, entry in zip(rows[1:], doc["sizes"]):
            assert abs(float(row[1]) - entry["hr1_mean"]) < 1e-12
            assert float(row[1]) == entry["hr1_mean"]

    def test_schema_guard(self):
        with pytest.raises(ValueError, match="schema"):
            report_from_dict({"schema": 99, "sizes": []})


class TestSweepConfigValidation:
    def test_sizes_must_ascend(self):
        with pytest.raises(ValueError, match="ascending"):
            SweepConfig(distractor_sizes=(10, 10))
        with pytest.raises(ValueError, match="ascending"):
            SweepConfig(distractor_sizes=(100, 50))

    def test_trials_positive(self):
        with pytest.raises(ValueError, match="trials"):
            SweepConfig(distractor_sizes=(0,), trials=0)
