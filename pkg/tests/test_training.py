import math

import numpy as np
import pytest

from temgnet import model as M
from temgnet import tensor as T
from temgnet import training as tr
from temgnet.errors import ConfigError, ContractError, NumericDomainError
from temgnet.model import ModelConfig
from temgnet.segmentation import SegmentDataset
from temgnet.training import AdamState, TrainConfig, adam_step, cross_entropy

SMALL = ModelConfig(n_layers=1, d_model=8, mlp_size=16, n_heads=2, patch_size=4, window=16, n_classes=3)


def toy_dataset(n_per_class=40, seed=0, n_classes=3):
    """Separable toy: class k has a distinct constant pattern plus mild noise."""
    rng = np.random.default_rng(seed)
    patterns = rng.standard_normal((n_classes, 4, 1))
    chunks, labels = [], []
    for k in range(n_classes):
        for _ in range(n_per_class):
            chunks.append(patterns[k] + 0.1 * rng.standard_normal((4, 16)))
            labels.append(k + 1)
    signal = np.concatenate(chunks, axis=1)
    n = len(labels)
    return SegmentDataset([signal], np.zeros(n), np.arange(n) * 16, labels, np.ones(n), np.ones(n), 16, 16)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(np.zeros((1, 17)), [5]).item()
        assert loss == pytest.approx(math.log(17), abs=1e-15)
        assert loss == pytest.approx(2.83321, abs=1e-5)

    def test_saturated(self):
        logits = np.zeros(17)
        logits[3] = 30.0
        # ln(1 + 16 e^-30): sixteen wrong classes each contribute e^-30
        loss = cross_entropy(logits, 4).item()
        assert loss == pytest.approx(16 * math.exp(-30), rel=1e-3)
        assert loss < 2e-12

    def test_batch_mean(self, rng):
        z = rng.standard_normal((4, 5))
        y = np.array([1, 5, 2, 2])
        per = [-(z[i, y[i] - 1] - math.log(np.exp(z[i]).sum())) for i in range(4)]
        assert cross_entropy(z, y).item() == pytest.approx(np.mean(per), rel=1e-14)

    def test_gradient_is_softmax_minus_onehot(self, rng):
        z = T.Tensor(rng.standard_normal(6), requires_grad=True)
        T.backward(cross_entropy(z, 3))
        p = np.exp(z.data) / np.exp(z.data).sum()
        onehot = np.eye(6)[2]
        np.testing.assert_allclose(z.grad, (p - onehot)[None][0], atol=1e-15)

    def test_large_logits_stable(self):
        assert np.isfinite(cross_entropy(np.array([[1000.0, -1000.0, 0.0]]), [2]).item())

    def test_nonnegative(self, rng):
        for _ in range(50):
            assert cross_entropy(rng.standard_normal((3, 4)) * 10, [1, 2, 4]).item() >= 0

    @pytest.mark.parametrize("bad", [0, 18])
    def test_label_range(self, bad):
        with pytest.raises(ContractError):
            cross_entropy(np.zeros((1, 17)), [bad])


def scalar_adam(theta, grads, lr, b1, b2, eps, wd):
    """Independent per-coordinate reference."""
    theta = list(theta)
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t, g in enumerate(grads, start=1):
        for i in range(len(theta)):
            gi = g[i] + wd * theta[i]
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            theta[i] -= lr * mh / (math.sqrt(vh) + eps)
    return np.array(theta)


class TestAdam:
    def test_first_step_is_lr_times_sign(self, rng):
        cfg = TrainConfig(learning_rate=1e-3, weight_decay=0.0)
        p = {"w.weight": T.Tensor(np.zeros(5))}
        g = np.array([0.5, -2.0, 1e-3, -7.0, 3.0])
        adam_step(p, AdamState(), cfg, {"w.weight": g})
        np.testing.assert_allclose(p["w.weight"].data, -1e-3 * np.sign(g), rtol=1e-4)

    def test_zero_gradient_fixed_point(self, rng):
        cfg = TrainConfig(weight_decay=0.0)
        x = rng.standard_normal(4)
        p = {"a.weight": T.Tensor(x.copy())}
        st = AdamState()
        for _ in range(3):
            adam_step(p, st, cfg, {"a.weight": np.zeros(4)})
        np.testing.assert_array_equal(p["a.weight"].data, x)
        assert st.t == 3

    @pytest.mark.parametrize("wd", [0.0, 0.001, 0.1])
    def test_matches_scalar_reference(self, rng, wd):
        cfg = TrainConfig(learning_rate=3e-3, weight_decay=wd)
        theta = rng.standard_normal(7)
        grads = [rng.standard_normal(7) for _ in range(12)]
        p = {"x.weight": T.Tensor(theta.copy())}
        st = AdamState()
        for g in grads:
            adam_step(p, st, cfg, {"x.weight": g})
        ref = scalar_adam(theta, grads, 3e-3, 0.9, 0.999, 1e-8, wd)
        assert np.max(np.abs(p["x.weight"].data - ref)) < 1e-12
        assert np.all(st.v["x.weight"] >= 0)

    def test_decay_exemptions(self):
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5)
        names = ["l.weight", "l.bias", "ln.gamma", "ln.beta", "cls", "pos"]
        p = {k: T.Tensor(np.ones(2)) for k in names}
        adam_step(p, AdamState(), cfg, {k: np.zeros(2) for k in names})
        assert np.all(p["l.weight"].data < 1.0)
        for k in names[1:]:
            np.testing.assert_array_equal(p[k].data, 1.0)

    def test_decoupled_shrinks_directly(self):
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5, decoupled_weight_decay=True)
        p = {"l.weight": T.Tensor(np.full(2, 2.0))}
        adam_step(p, AdamState(), cfg, {"l.weight": np.zeros(2)})
        np.testing.assert_allclose(p["l.weight"].data, 2.0 - 0.1 * 0.5 * 2.0)

    def test_nan_aborts_without_update(self):
        p = {"a.weight": T.Tensor(np.ones(3)), "b.weight": T.Tensor(np.ones(3))}
        st = AdamState()
        with pytest.raises(NumericDomainError, match="b.weight"):
            adam_step(p, st, TrainConfig(), {"a.weight": np.ones(3), "b.weight": np.array([1.0, np.nan, 0.0])})
        np.testing.assert_array_equal(p["a.weight"].data, 1.0)
        assert st.t == 0

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(betas=(1.0, 0.999))
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)


def test_loss_non_increasing_on_fixed_batch():
    """Sanity envelope: 20 full-batch steps at lr 1e-3 rarely increase the loss."""
    ds = toy_dataset(n_per_class=8)
    X, y = ds.X, ds.labels
    cfg = TrainConfig(learning_rate=1e-3, weight_decay=0.0)
    good = 0
    seeds = range(20)
    for seed in seeds:
        m = M.init_params(SMALL, seed)
        st = AdamState()
        losses = []
        for _ in range(20):
            loss = cross_entropy(m.forward_batch(X), y)
            losses.append(loss.item())
            m.zero_grad()
            T.backward(loss)
            adam_step(m.params, st, cfg)
        good += all(b <= a for a, b in zip(losses, losses[1:]))
    assert good >= 0.95 * len(seeds)


class TestTrain:
    def test_zero_epochs_is_identity(self):
        m = M.init_params(SMALL, 3)
        res = tr.train(m, toy_dataset(), TrainConfig(epochs=0))
        for k in m.params:
            assert res.model.params[k].data.tobytes() == m.params[k].data.tobytes()
        assert res.trace == []

    def test_original_model_untouched(self):
        m = M.init_params(SMALL, 3)
        before = m.state_dict()
        tr.train(m, toy_dataset(), TrainConfig(epochs=1, batch_size=32))
        assert all(before[k].tobytes() == m.params[k].data.tobytes() for k in before)

    def test_deterministic(self):
        ds = toy_dataset()
        cfg = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=25, seed=4)
        a = tr.train(M.init_params(SMALL, 1), ds, cfg)
        b = tr.train(M.init_params(SMALL, 1), ds, cfg)
        for k in a.model.params:
            assert a.model.params[k].data.tobytes() == b.model.params[k].data.tobytes()
        assert [r.mean_loss for r in a.trace] == [r.mean_loss for r in b.trace]

    def test_step_count_keeps_partial_batch(self):
        ds = toy_dataset(n_per_class=10)       # 30 windows
        steps = []
        orig = tr.adam_step

        def counting(*args, **kw):
            steps.append(1)
            return orig(*args, **kw)

        tr.adam_step = counting
        try:
            tr.train(M.init_params(SMALL), ds, TrainConfig(epochs=3, batch_size=8))
        finally:
            tr.adam_step = orig
        assert len(steps) == 3 * 4

    def test_separable_toy_overfits(self):
        cfg = TrainConfig(learning_rate=3e-3, epochs=50, batch_size=32, seed=0)
        res = tr.train(M.init_params(SMALL, 0), toy_dataset(), cfg,
                       callback=lambda r, m: r.train_accuracy >= 0.99)
        assert res.trace[-1].train_accuracy >= 0.99
        assert res.best_epoch == len(res.trace)

    def test_empty_dataset(self):
        ds = toy_dataset().take(np.array([], dtype=int))
        with pytest.raises(ContractError):
            tr.train(M.init_params(SMALL), ds, TrainConfig())

    def test_window_mismatch(self):
        with pytest.raises(ContractError):
            tr.train(M.init_params(ModelConfig(patch_size=4, window=20, d_model=8, n_heads=2, n_classes=3)),
                     toy_dataset(), TrainConfig())


def test_trace_round_trip(tmp_path):
    trace = [tr.EpochRecord(1, 0.123456789012345, 0.5, 1.25), tr.EpochRecord(2, 0.1, 2 / 3, 1.0)]
    tr.write_trace(tmp_path / "t.csv", trace)
    back = tr.read_trace(tmp_path / "t.csv")
    assert [(r.epoch, r.mean_loss, r.train_accuracy) for r in back] == [(r.epoch, r.mean_loss, r.train_accuracy) for r in trace]
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "epoch,mean_loss,train_accuracy,wall_seconds"
