import math

import numpy as np
import pytest
import torch

from latentdb.errors import NumericError, TrainingDiverged
from latentdb.flownet import FlowNetConfig, init_params
from latentdb.store import EmbeddingMatrix
from latentdb.trainer import (
    AdamWState,
    TrainConfig,
    adamw_step,
    cosine_lr,
    draw_flow_noise,
    init_adamw_state,
    loss_given_noise,
    rf_interpolate,
    rf_loss,
    rf_velocity_target,
    train,
)

TINY = FlowNetConfig(dim=4, time_dim=4, width=8, expansion=16, depth=2)


class TestInterpolation:
    def test_endpoints(self):
        x = np.array([1.0, 2.0], dtype=np.float32)
        z = np.array([-3.0, 5.0], dtype=np.float32)
        assert np.array_equal(rf_interpolate(x, z, 0.0), x)
        assert np.array_equal(rf_interpolate(x, z, 1.0), z)

    def test_midpoint(self):
        x = np.array([1.0, 0.0], dtype=np.float32)
        z = np.array([0.0, 1.0], dtype=np.float32)
        assert np.allclose(rf_interpolate(x, z, 0.5), [0.5, 0.5])

    def test_batched_per_row_times(self):
        x = np.zeros((2, 3), dtype=np.float32)
        z = np.ones((2, 3), dtype=np.float32)
        out = rf_interpolate(x, z, np.array([0.0, 1.0], dtype=np.float32))
        assert np.array_equal(out[0], np.zeros(3))
        assert np.array_equal(out[1], np.ones(3))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            rf_interpolate(np.zeros(2), np.zeros(3), 0.5)


class TestVelocityTarget:
    def test_fixed_point(self):
        x = np.array([1.0, 2.0])
        assert np.array_equal(rf_velocity_target(x, x), np.zeros(2))

    def test_zero_data(self):
        z = np.array([3.0, -1.0])
        assert np.array_equal(rf_velocity_target(np.zeros(2), z), z)

    def test_hand_value(self):
        out = rf_velocity_target(np.array([1.0, 2.0]), np.array([3.0, 1.0]))
        assert np.array_equal(out, [2.0, -1.0])


class _OracleNet(torch.nn.Module):
    """Returns a preset velocity regardless of input (keeps a grad path)."""

    def __init__(self, config, v):
        super().__init__()
        self.config = config
        self.v = v
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x, t):
        return self.v + self.dummy * 0


class TestRfLoss:
    def test_zero_predictor_baseline_is_two(self):
        # E||z - x||^2 / d = 2 for independent standard normals
        net = init_params(FlowNetConfig(dim=16, time_dim=4, width=8, expansion=16, depth=1), 0)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        rng = np.random.default_rng(123)
        x = rng.standard_normal((10000, 16)).astype(np.float32)
        batch = EmbeddingMatrix.from_array(x)
        loss, grads = rf_loss(net, batch, np.random.default_rng(7))
        assert abs(loss - 2.0) < 0.1
        assert set(grads) == {n for n, _ in net.named_parameters()}

    def test_oracle_predictor_gives_zero_loss(self):
        rng_draw = np.random.default_rng(55)
        x = np.random.default_rng(1).standard_normal((32, 4)).astype(np.float32)
        z, _ = draw_flow_noise(rng_draw, 32, 4)
        v = torch.from_numpy(z - x)
        net = _OracleNet(TINY, v)
        loss, _ = rf_loss(net, EmbeddingMatrix.from_array(x), np.random.default_rng(55))
        assert loss == 0.0

    def test_loss_invariant_under_joint_row_permutation(self):
        net = init_params(TINY, 2)
        rng = np.random.default_rng(3)
        x = torch.from_numpy(rng.standard_normal((64, 4)).astype(np.float32))
        z, t = draw_flow_noise(rng, 64, 4)
        z, t = torch.from_numpy(z), torch.from_numpy(t)
        base = loss_given_noise(net, x, z, t)
        perm = torch.from_numpy(np.random.default_rng(4).permutation(64))
        permuted = loss_given_noise(net, x[perm], z[perm], t[perm])
        assert torch.allclose(base, permuted, rtol=1e-5, atol=1e-7)

    def test_empty_batch_rejected(self):
        net = init_params(TINY, 2)
        empty = EmbeddingMatrix.from_array(np.zeros((0, 4), dtype=np.float32))
        with pytest.raises(ValueError, match="nonempty"):
            rf_loss(net, empty, np.random.default_rng(0))

    def test_dim_mismatch_rejected(self):
        net = init_params(TINY, 2)
        batch = EmbeddingMatrix.from_array(np.zeros((2, 5), dtype=np.float32))
        with pytest.raises(ValueError, match="dim"):
            rf_loss(net, batch, np.random.default_rng(0))


class TestCosineSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 5e-5, 1e-6) == pytest.approx(5e-5)
        assert cosine_lr(100, 100, 5e-5, 1e-6) == pytest.approx(1e-6)
        assert cosine_lr(50, 100, 5e-5, 1e-6) == pytest.approx(2.55e-5)

    def test_monotone_non_increasing(self):
        seq = [cosine_lr(s, 1000, 1e-3, 1e-5) for s in range(1001)]
        assert all(b <= a for a, b in zip(seq, seq[1:]))

    def test_clamped_past_total(self):
        assert cosine_lr(150, 100, 5e-5, 1e-6) == 1e-6

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            cosine_lr(0, 0, 1e-3, 1e-5)
        with pytest.raises(ValueError):
            cosine_lr(-1, 10, 1e-3, 1e-5)


class TestAdamW:
    def _single_param(self, value):
        p = torch.tensor([value], dtype=torch.float64)
        params = {"p": p}
        return params, init_adamw_state(params)

    def test_zero_grad_zero_decay_is_fixed_point(self):
        params, state = self._single_param(1.5)
        for _ in range(5):
            adamw_step(params, {"p": torch.zeros(1, dtype=torch.float64)}, state, 0.1, weight_decay=0.0)
        assert params["p"].item() == 1.5

    def test_quadratic_converges_and_matches_scalar_oracle(self):
        params, state = self._single_param(1.0)
        # independent plain-float recursion of the same update rule
        p_ref, m_ref, v_ref = 1.0, 0.0, 0.0
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        for step in range(1, 201):
            g = 2.0 * params["p"].item()
            adamw_step(params, {"p": torch.tensor([g], dtype=torch.float64)}, state,
                       lr, beta1=b1, beta2=b2, eps=eps, weight_decay=0.0)
            g_ref = 2.0 * p_ref
            m_ref = b1 * m_ref + (1 - b1) * g_ref
            v_ref = b2 * v_ref + (1 - b2) * g_ref * g_ref
            mh = m_ref / (1 - b1**step)
            vh = v_ref / (1 - b2**step)
            p_ref -= lr * mh / (math.sqrt(vh) + eps)
            assert abs(params["p"].item() - p_ref) < 1e-12
        assert abs(params["p"].item()) < 1e-2

    def test_decay_only_shrinks_multiplicatively(self):
        params, state = self._single_param(2.0)
        lr, wd = 0.05, 0.1
        for step in range(1, 4):
            adamw_step(params, {"p": torch.zeros(1, dtype=torch.float64)}, state, lr, weight_decay=wd)
            assert params["p"].item() == pytest.approx(2.0 * (1 - lr * wd) ** step, rel=1e-12)

    def test_nonfinite_grads_rejected(self):
        params, state = self._single_param(1.0)
        with pytest.raises(NumericError, match="'p'"):
            adamw_step(params, {"p": torch.tensor([float("nan")], dtype=torch.float64)}, state, 0.1)

    def test_step_counter_increments(self):
        params, state = self._single_param(1.0)
        adamw_step(params, {"p": torch.ones(1, dtype=torch.float64)}, state, 0.1)
        adamw_step(params, {"p": torch.ones(1, dtype=torch.float64)}, state, 0.1)
        assert state.step == 2


class TestGradientCheck:
    def test_analytic_matches_central_differences(self):
        config = TINY
        net = init_params(config, 31).double()
        rng = np.random.default_rng(17)
        x = torch.from_numpy(rng.standard_normal((8, 4)))
        z = torch.from_numpy(rng.standard_normal((8, 4)))
        t = torch.from_numpy(rng.random(8))

        loss = loss_given_noise(net, x, z, t)
        params = list(net.parameters())
        grads = torch.autograd.grad(loss, params)

        flat_sizes = [p.numel() for p in params]
        total = sum(flat_sizes)
        probe_rng = np.random.default_rng(99)
        eps = 1e-4
        for flat_index in probe_rng.integers(0, total, size=10):
            remaining = int(flat_index)
            for p, g in zip(params, grads):
                if remaining < p.numel():
                    break
                remaining -= p.numel()
            with torch.no_grad():
                orig = p.view(-1)[remaining].item()
                p.view(-1)[remaining] = orig + eps
                plus = loss_given_noise(net, x, z, t).item()
                p.view(-1)[remaining] = orig - eps
                minus = loss_given_noise(net, x, z, t).item()
                p.view(-1)[remaining] = orig
            fd = (plus - minus) / (2 * eps)
            analytic = g.view(-1)[remaining].item()
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
            assert rel < 1e-2, (flat_index, analytic, fd)


class TestTrain:
    def _corpus(self, n=300, dim=4, seed=0):
        rng = np.random.default_rng(seed)
        return EmbeddingMatrix.from_array(rng.standard_normal((n, dim)).astype(np.float32))

    def test_deterministic_across_runs(self):
        corpus = self._corpus()
        cfg = TrainConfig(epochs=2, batch_size=64, seed=5, validate_every=10)
        a = train(corpus, cfg, TINY)
        b = train(corpus, cfg, TINY)
        for (na, pa), (nb, pb) in zip(a.net.state_dict().items(), b.net.state_dict().items()):
            assert na == nb and torch.equal(pa, pb)
        assert a.log == b.log

    def test_corpus_smaller_than_batch_rejected(self):
        with pytest.raises(ValueError, match="batch_size"):
            train(self._corpus(n=10), TrainConfig(epochs=1, batch_size=64), TINY)

    def test_divergence_aborts_with_last_good_params(self):
        corpus = self._corpus(n=200)
        cfg = TrainConfig(epochs=20, batch_size=64, seed=1, lr_max=1e12, lr_min=1e11,
                          weight_decay=0.0, validate_every=1, validation_sample_count=16)
        with pytest.raises(TrainingDiverged) as info:
            train(corpus, cfg, TINY)
        assert info.value.params is not None
        for tensor in info.value.params.values():
            assert torch.isfinite(tensor).all()

    def test_log_and_lr_schedule(self, tmp_path):
        corpus = self._corpus(n=256)
        log_path = tmp_path / "train.jsonl"
        cfg = TrainConfig(epochs=3, batch_size=64, seed=2, validate_every=10)
        result = train(corpus, cfg, TINY, log_path=log_path)
        assert [r["epoch"] for r in result.log] == [1, 2, 3]
        lrs = [r["lr"] for r in result.log]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert len(log_path.read_text().splitlines()) == 3

    def test_checkpoints_written_at_validation(self, tmp_path):
        corpus = self._corpus(n=256)
        ckpt = tmp_path / "m.ckpt"
        cfg = TrainConfig(epochs=2, batch_size=64, seed=2, validate_every=1,
                          validation_sample_count=64)
        result = train(corpus, cfg, TINY, checkpoint_path=ckpt)
        assert ckpt.exists() and (tmp_path / "m.ckpt.blob").exists()
        assert all("fd" in r for r in result.log)


@pytest.mark.slow
class TestTrainOnMixture:
    def test_loss_halves_and_fd_improves(self, trained_mix_model):
        log = trained_mix_model.log
        assert log[-1]["mean_loss"] < 0.5 * log[0]["mean_loss"]
        fds = {r["epoch"]: r["fd"] for r in log if "fd" in r}
        assert fds[100] < fds[10]

    def test_all_parameters_finite(self, trained_mix_model):
        for p in trained_mix_model.net.parameters():
            assert torch.isfinite(p).all()
