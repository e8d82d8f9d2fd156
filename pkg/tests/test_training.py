import json
import math

import numpy as np
import pytest

from pianoexpr import checkpoint as ckpt
from pianoexpr.model import ModelConfig
from pianoexpr.numerics import Tensor, backward
from pianoexpr.synthetic import synthetic_windows
from pianoexpr.training import (
    EarlyStopping,
    LossWeights,
    TrainConfig,
    TrainingError,
    TrainState,
    WindowSet,
    feature_loss,
    fit,
    gradnorm_update,
    total_loss,
    train_epoch,
)

from test_model import random_io

SMALL = ModelConfig(num_layers=1, num_heads=2, hidden_dim=8, ff_dim=16, window=8)


def tiny_data(rng, n=4, pianists=None):
    ios = [random_io(rng, 8, int(rng.integers(3, 9))) for _ in range(n)]
    return WindowSet.from_windows(ios, pianists if pianists is not None else [i % 6 for i in range(n)])


def state(train_config=None, **kw):
    tc = train_config or TrainConfig(batch_size=2, max_epochs=50, patience=5, **kw)
    return TrainState.create(SMALL, tc, pianists=("a", "b", "c", "d", "e", "f"))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

class TestFeatureLoss:
    def test_relative_branch(self):
        assert feature_loss([110.0], [100.0], [1]).item() == pytest.approx(0.1, abs=1e-15)

    def test_zero_target_branch(self):
        assert feature_loss([5.0], [0.0], [1], alpha=0.001).item() == pytest.approx(0.005, abs=1e-15)

    def test_exact_prediction(self, rng):
        t = rng.integers(-50, 50, 20).astype(float)
        assert feature_loss(t, t, np.ones(20)).item() == 0.0

    def test_mean_over_unmasked(self):
        loss = feature_loss([110.0, 5.0, 999.0], [100.0, 0.0, 1.0], [1, 1, 0], alpha=0.001).item()
        assert loss == pytest.approx((0.1 + 0.005) / 2, abs=1e-15)

    def test_masked_positions_inert_bitwise(self, rng):
        pred = rng.normal(size=30) * 100
        target = rng.integers(-100, 100, 30).astype(float)
        mask = (rng.random(30) < 0.6).astype(int)
        mask[0] = 1
        other = pred.copy()
        other[mask == 0] = rng.normal(size=(mask == 0).sum()) * 1e6
        assert feature_loss(pred, target, mask).item() == feature_loss(other, target, mask).item()

    def test_scale_invariance(self, rng):
        # scaling prediction and nonzero target together leaves the loss unchanged
        t = rng.integers(1, 500, 40).astype(float) * rng.choice([-1, 1], 40)
        eps = rng.normal(size=40) * 0.1
        k = 3.7
        a = feature_loss(k * t * (1 + eps), k * t, np.ones(40)).item()
        b = feature_loss(t * (1 + eps), t, np.ones(40)).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_all_masked_rejected(self):
        with pytest.raises(ValueError, match="masked"):
            feature_loss([1.0], [1.0], [0])

    def test_gradient_sign(self):
        pred = Tensor(np.array([120.0, 80.0]), requires_grad=True, dtype=np.float64)
        backward(feature_loss(pred, [100.0, 100.0], [1, 1]))
        assert pred.grad[0] > 0 > pred.grad[1]


class TestTotalLoss:
    def test_unit_weights(self):
        assert total_loss({"velocity": 0.1, "dd": 0.2, "ioi": 0.3}, LossWeights()) == pytest.approx(0.6)

    def test_zero_losses(self):
        assert total_loss({"velocity": 0.0, "dd": 0.0, "ioi": 0.0}, LossWeights(0.5, 2, 0.5)) == 0.0

    def test_linearity(self, rng):
        losses = dict(zip(("velocity", "dd", "ioi"), rng.random(3)))
        w = rng.uniform(0.1, 2, 3)
        a = total_loss(losses, LossWeights.from_array(w))
        b = total_loss(losses, LossWeights.from_array(2 * w))
        assert b == pytest.approx(2 * a, rel=1e-15)

    def test_nonpositive_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(0, 1, 2)


# ---------------------------------------------------------------------------
# GradNorm
# ---------------------------------------------------------------------------

def random_gradnorm_case(rng):
    w = rng.uniform(0.2, 2, 3) if rng.random() < 0.5 else rng.dirichlet([0.2] * 3) + 1e-4
    w = w * 3 / w.sum()
    return w, rng.uniform(0.01, 10, 3), rng.uniform(0.1, 1.5, 3)


class TestGradNorm:
    def test_sum_exact_and_floor(self, rng):
        for _ in range(5000):
            w, n, r = random_gradnorm_case(rng)
            out = gradnorm_update(LossWeights.from_array(w), n, r)
            assert out.w_v + out.w_dd + out.w_ioi == 3.0
            assert min(out.as_array()) >= 1e-4

    def test_repeated_updates_keep_invariants(self, rng):
        w = LossWeights()
        for _ in range(500):
            w = gradnorm_update(w, rng.uniform(0, 5, 3), rng.uniform(0.01, 2, 3))
            assert w.w_v + w.w_dd + w.w_ioi == 3.0
            assert min(w.as_array()) >= 1e-4

    @pytest.mark.parametrize("w", [(1.0, 1.0, 1.0), (0.5, 1.0, 1.5)])
    def test_fixed_point(self, w):
        # balanced G = w * norm and equal ratios
        norms = 1.0 / np.array(w)
        out = gradnorm_update(LossWeights(*w), norms, [0.7, 0.7, 0.7])
        assert out.as_array().tolist() == list(w)

    def test_largest_term_decreases_fd_oracle(self, rng):
        # the oracle is the sign of a central difference of the balancing
        # objective (target held constant, as GradNorm differentiates it)
        checked = 0
        for _ in range(3000):
            w, n, r = random_gradnorm_case(rng)
            rr = r / r.mean()
            t = int(np.argmax(w * n / rr ** 1.5))
            target = (w * n).mean() * rr ** 1.5
            e = np.zeros(3)
            e[t] = 1e-7
            fd = (np.abs((w + e) * n - target).sum() - np.abs((w - e) * n - target).sum()) / 2e-7
            if fd <= 0 or w[t] < 0.03:
                continue
            checked += 1
            out = gradnorm_update(LossWeights.from_array(w), n, r).as_array()
            assert out[t] < w[t]
        assert checked > 2000

    def test_non_finite_rejected(self):
        with pytest.raises(TrainingError):
            gradnorm_update(LossWeights(), [1, np.nan, 1], [1, 1, 1])


# ---------------------------------------------------------------------------
# Epochs
# ---------------------------------------------------------------------------

class TestTrainEpoch:
    def test_deterministic(self, rng):
        data = tiny_data(rng)
        a, b = state(), state()
        for _ in range(3):
            ra, rb = train_epoch(a, data), train_epoch(b, data)
            assert ra == rb
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)
        assert a.weights == b.weights

    def test_all_pad_batch_rejected(self, rng):
        data = tiny_data(rng, 2)
        data.mask[1] = 0
        st = state(TrainConfig(batch_size=1, max_epochs=5, patience=2))
        with pytest.raises(TrainingError, match="padding"):
            train_epoch(st, data)

    def test_lr_follows_schedule(self, rng):
        data = tiny_data(rng)
        st = state(TrainConfig(batch_size=4, max_epochs=40, patience=5, T_0=4, T_mult=1))
        lrs = [train_epoch(st, data)["lr"] for _ in range(5)]
        assert lrs[0] == lrs[4] == 1e-4
        assert lrs[2] == pytest.approx(5e-5, abs=1e-12)

    def test_weights_stay_normalized(self, rng):
        data = tiny_data(rng)
        st = state()
        for _ in range(5):
            train_epoch(st, data)
            assert st.weights.w_v + st.weights.w_dd + st.weights.w_ioi == 3.0

    def test_tiny_batch_overfits(self):
        """Single tiny batch for 200 epochs: total loss drops by at least 90%."""
        cfg = ModelConfig(num_layers=2, num_heads=2, hidden_dim=32, ff_dim=64, window=16)
        wins, ids = synthetic_windows(1, 16, pianists=2)
        data = WindowSet.from_windows(wins, ids)
        st = TrainState.create(cfg, TrainConfig(batch_size=2, max_epochs=300, learning_rate=3e-3))
        first = train_epoch(st, data)["train_total"]
        for _ in range(199):
            last = train_epoch(st, data)["train_total"]
        assert last <= 0.1 * first, (first, last)


class TestEarlyStopping:
    def test_flat_from_epoch_5(self):
        stop = EarlyStopping(30)
        values = [10, 9, 8, 7, 6] + [6] * 100
        stopped = next(e for e, v in enumerate(values, start=1) if stop.update(e, v))
        assert stopped == 35 and stop.best_epoch == 5

    def test_strict_improvement_runs_out(self):
        stop = EarlyStopping(30)
        assert not any(stop.update(e, 100 - e) for e in range(1, 401))

    def test_fit_flat_validation(self, rng, tmp_path):
        """With lr 0 the validation loss is flat from the first epoch."""
        data = tiny_data(rng)
        cfg = TrainConfig(batch_size=4, max_epochs=100, patience=30, learning_rate=0.0)
        result = fit(state(cfg), data, data, tmp_path)
        assert result.best_epoch == 1
        assert result.stopped_epoch == 1 + 30
        log = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
        assert len(log) == 31
        assert result.best_val == min(r["val_total"] for r in log)
        best = TrainState.load(tmp_path / "best.ckpt")
        assert best.epoch == 1

    def test_best_checkpoint_is_minimum(self, rng, tmp_path):
        data = tiny_data(rng)
        cfg = TrainConfig(batch_size=2, max_epochs=25, patience=5, learning_rate=3e-3)
        result = fit(state(cfg), data, tiny_data(rng), tmp_path)
        log = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
        vals = [r["val_total"] for r in log]
        assert result.best_val == min(vals)
        best = TrainState.load(tmp_path / "best.ckpt")
        assert best.epoch == result.best_epoch == vals.index(min(vals)) + 1

    def test_log_records(self, rng, tmp_path):
        data = tiny_data(rng)
        fit(state(TrainConfig(batch_size=2, max_epochs=3, patience=2)), data, data, tmp_path)
        rec = json.loads((tmp_path / "train_log.jsonl").read_text().splitlines()[0])
        for key in ("epoch", "lr", "w_v", "w_dd", "w_ioi", "train_velocity", "train_dd", "train_ioi",
                    "val_velocity", "val_dd", "val_ioi", "val_total"):
            assert key in rec

    def test_empty_split(self, rng):
        data = tiny_data(rng)
        with pytest.raises(TrainingError):
            fit(state(), data, data.subset(np.arange(0)))


class TestCheckpoint:
    def test_round_trip_exact(self, rng, tmp_path):
        data = tiny_data(rng)
        st = state()
        train_epoch(st, data)
        st.save(tmp_path / "s.ckpt")
        back = TrainState.load(tmp_path / "s.ckpt")
        for k in st.params:
            assert back.params[k].data.dtype == np.float32
            assert np.array_equal(back.params[k].data, st.params[k].data)
        assert back.weights == st.weights and back.epoch == st.epoch
        assert back.adam.step == st.adam.step

    def test_bytes_deterministic(self, rng):
        st = state()
        a = ckpt.dumps(*st.to_checkpoint())
        b = ckpt.dumps(*state().to_checkpoint())
        assert a == b

    def test_resume_matches_uninterrupted(self, rng, tmp_path):
        data = tiny_data(rng)
        a = state()
        for _ in range(4):
            ra = train_epoch(a, data)
        b = state()
        for _ in range(2):
            train_epoch(b, data)
        b.save(tmp_path / "mid.ckpt")
        b = TrainState.load(tmp_path / "mid.ckpt")
        for _ in range(2):
            rb = train_epoch(b, data)
        assert ra == rb and b.epoch == 4
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)

    def test_corrupt_rejected(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"nope")
        with pytest.raises(ckpt.CheckpointError):
            TrainState.load(tmp_path / "bad.ckpt")

    def test_window_set_io(self, rng, tmp_path):
        data = tiny_data(rng)
        data.save(tmp_path, "train")
        back = WindowSet.load(tmp_path, "train")
        assert all(np.array_equal(getattr(data, k), getattr(back, k))
                   for k in ("inputs", "targets", "mask", "pianist"))
