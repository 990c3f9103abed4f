import importlib

import numpy as np
import pytest

from airpcm import tensor as tn
from airpcm.data import WindowSample
from airpcm.geo import Station, build_station_graph
from airpcm.model import AirPCM, AirPCMConfig
from airpcm.tensor import Parameter, Tensor, finite_diff_gradcheck
train_mod = importlib.import_module("airpcm.train")
from airpcm.train import (AdamState, DivergenceError, TrainConfig, adam_step, clip_gradients, loss_mae, train,
                          train_step)


def param(values, grad):
    p = Parameter("w", np.array(values, dtype=float), {})
    p.grad = np.array(grad, dtype=float)
    return p


class TestLoss:
    def test_zero_and_offset(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4))
        assert float(loss_mae(Tensor(x), x).data) == 0.0
        assert float(loss_mae(Tensor(x + 1), x).data) == pytest.approx(1.0, abs=1e-15)

    def test_gradient_is_sign_over_count(self):
        rng = np.random.default_rng(1)
        p, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        x = Tensor(p, requires_grad=True)
        tn.backward(loss_mae(x, t))
        np.testing.assert_array_equal(x.grad, np.sign(p - t) / 12)
        assert finite_diff_gradcheck(lambda a: loss_mae(a, t), p) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(tn.ShapeError):
            loss_mae(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


class TestAdam:
    def test_zero_gradient_leaves_weights(self):
        p = param([1.0, -2.0], [0.0, 0.0])
        adam_step([p], TrainConfig(), AdamState(), 1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_hand_value(self):
        p = param([0.5, 0.5], [0.3, -2.0])
        cfg = TrainConfig(learning_rate=0.01)
        adam_step([p], cfg, AdamState(), 1)
        # step 1: m_hat = g, v_hat = g^2 -> delta = -lr * g / (|g| + eps)
        expected = 0.5 - 0.01 * np.array([0.3, -2.0]) / (np.array([0.3, 2.0]) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)

    def test_second_step_hand_value(self):
        p = param([0.0], [1.0])
        cfg = TrainConfig(learning_rate=0.1)
        st = AdamState()
        adam_step([p], cfg, st, 1)
        p.grad = np.array([3.0])
        adam_step([p], cfg, st, 2)
        m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0
        v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
        m_hat, v_hat = m / (1 - 0.81), v / (1 - 0.999 ** 2)
        p1 = -0.1 * 1.0 / (1.0 + 1e-8)
        assert p.data[0] == pytest.approx(p1 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), abs=1e-14)

    def test_clipping_norm_50_to_5(self):
        a, b = param([0.0, 0.0], [30.0, 0.0]), param([0.0], [40.0])
        norm = clip_gradients([a, b], 5.0)
        assert norm == 50.0
        np.testing.assert_allclose(a.grad, [3.0, 0.0])
        np.testing.assert_allclose(b.grad, [4.0])

    def test_clipping_before_moments(self):
        p = param([0.0, 0.0], [30.0, 40.0])
        st = AdamState()
        adam_step([p], TrainConfig(), st, 1)
        np.testing.assert_allclose(st.m["w"], 0.1 * np.array([3.0, 4.0]))

    def test_missing_gradient_and_step_index(self):
        p = Parameter("w", np.zeros(2), {})
        with pytest.raises(ValueError, match="no gradient"):
            adam_step([p], TrainConfig(), AdamState(), 1)
        with pytest.raises(ValueError, match="step_index"):
            adam_step([param([0.0], [1.0])], TrainConfig(), AdamState(), 0)


class TestConfig:
    def test_betas_key(self):
        cfg = TrainConfig.from_dict({"betas": [0.8, 0.99], "batch_size": 4})
        assert (cfg.beta1, cfg.beta2, cfg.batch_size) == (0.8, 0.99, 4)

    @pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(batch_size=-1), dict(beta1=1.0),
                                    dict(max_epochs=3, early_stop_patience=5)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"momentum": 0.9})


def tiny_setup(seed=0, n_windows=12):
    cfg = AirPCMConfig(N=2, K=1, C=1, tau=8, kappa=2, d_h=4, d_p=8, patch_len=4, patch_stride=2, n_heads=2,
                       depth=1, dropout=0.1, k_neighbors=1)
    graph = build_station_graph([Station("a", 30, 110), Station("b", 31, 111)], 1)
    rng = np.random.default_rng(seed)
    t0 = np.datetime64("2024-01-01T00:00:00")
    ws = [WindowSample(rng.normal(size=(2, 1, 8)), rng.normal(size=(2, 1, 8)), rng.normal(size=(2, 1, 2)), i,
                       t0 + np.timedelta64(i, "h"), 1.0) for i in range(n_windows)]
    return cfg, graph, ws


class TestLoop:
    def test_determinism(self):
        logs = []
        for _ in range(2):
            cfg, graph, ws = tiny_setup()
            m = AirPCM(cfg, graph, seed=3)
            rec = train(m, ws[:8], ws[8:], TrainConfig(max_epochs=3, early_stop_patience=3, batch_size=4, seed=5))
            logs.append(([(e.train_loss, e.val_mae) for e in rec.epochs], m.params["deco.out.weight"].data.copy()))
        assert logs[0][0] == logs[1][0]
        assert logs[0][1].tobytes() == logs[1][1].tobytes()

    def test_early_stopping_restores_epoch_one(self, monkeypatch):
        cfg, graph, ws = tiny_setup()
        m = AirPCM(cfg, graph, seed=0)
        vals = iter(np.arange(1.0, 20.0))
        monkeypatch.setattr(train_mod, "validation_mae", lambda model, windows, batch_size=64: next(vals))
        snap = {}

        def progress(epoch, tl, vm):
            if epoch == 1:
                snap.update({k: p.data.copy() for k, p in m.params.items()})

        rec = train(m, ws[:8], ws[8:], TrainConfig(max_epochs=10, early_stop_patience=2, batch_size=4),
                    progress=progress)
        assert [e.epoch for e in rec.epochs] == [1, 2, 3]
        assert rec.stopped_early and rec.best_epoch == 1
        for k, p in m.params.items():
            np.testing.assert_array_equal(p.data, snap[k])

    def test_loss_decreases(self):
        cfg, graph, ws = tiny_setup(n_windows=16)
        m = AirPCM(cfg, graph, seed=1)
        rec = train(m, ws[:12], ws[12:], TrainConfig(max_epochs=6, early_stop_patience=6, batch_size=4,
                                                    learning_rate=3e-3))
        assert rec.epochs[-1].train_loss < rec.epochs[0].train_loss

    def test_divergence(self):
        cfg, graph, ws = tiny_setup()
        m = AirPCM(cfg, graph)
        bad = WindowSample(ws[0].past_pollutants, ws[0].past_meteorology, np.full((2, 1, 2), np.inf), 0,
                           ws[0].start_time, 1.0)
        from airpcm.data import stack_windows
        with pytest.raises(DivergenceError):
            train_step(m, stack_windows([bad]), TrainConfig(), AdamState(), np.random.default_rng(0))

    def test_empty(self):
        cfg, graph, ws = tiny_setup()
        with pytest.raises(ValueError):
            train(AirPCM(cfg, graph), [], ws, TrainConfig())

    def test_log_csv(self, tmp_path):
        cfg, graph, ws = tiny_setup()
        rec = train(AirPCM(cfg, graph), ws[:8], ws[8:], TrainConfig(max_epochs=2, early_stop_patience=2))
        rec.write_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_mae" and len(lines) == 3
