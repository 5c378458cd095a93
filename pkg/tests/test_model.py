import mpmath
import numpy as np
import pytest

from unicornn.core import ConfigurationError, LayerState, ModelConfig, layer_forward
from unicornn.model import (DropoutMask, Model, cross_entropy_loss, model_forward, mse_loss,
                            nrmse)
from unicornn.train import init_params


class TestModelForward:
    def test_identity_readout_equals_layer(self, rng):
        cfg = ModelConfig(L=1, m=4, d=3, dt=0.2, out_dim=4)
        model = init_params(cfg, 0)
        model.readout_W = np.eye(4)
        model.readout_b = np.zeros(4)
        u = rng.uniform(-1, 1, (20, 3))
        out, _ = model_forward(model, u)
        ref = layer_forward(LayerState.zeros(4), u, model.layers[0], 0.2, 1.0)[1]
        np.testing.assert_array_equal(out, ref)

    def test_no_dropout_train_equals_eval(self, rng):
        cfg = ModelConfig(L=3, m=4, d=2, dt=0.2, dropout=0.0)
        model = init_params(cfg, 1)
        u = rng.uniform(-1, 1, (15, 2, 2))
        a, _ = model_forward(model, u, train=False)
        b, _ = model_forward(model, u, train=True)
        np.testing.assert_array_equal(a, b)

    def test_manual_composition_with_masks(self, rng):
        cfg = ModelConfig(L=3, m=5, d=2, dt=[0.1, 0.2, 0.3], alpha=2.0, dropout=0.3)
        model = init_params(cfg, 2)
        u = rng.uniform(-1, 1, (12, 3, 2))
        mask = DropoutMask.sample(cfg, np.random.default_rng(0), batch=3)
        out, _ = model_forward(model, u, train=True, mask=mask)
        x = u
        for l, p in enumerate(model.layers):
            x = layer_forward(LayerState.zeros(5, 3), x, p, cfg.dt[l], 2.0)[1]
            if l < 2:
                x = x * mask.masks[l]
        ref = x @ model.readout_W.T + model.readout_b
        np.testing.assert_array_equal(out, ref)

    def test_residual_branch_reads_skip_source(self, rng):
        cfg = ModelConfig(L=3, m=3, d=2, dt=0.3, skip=2, out_dim=3)
        model = init_params(cfg, 4)
        model.readout_W = np.eye(3)
        model.readout_b = np.zeros(3)
        u = rng.uniform(-1, 1, (10, 2))
        out, _ = model_forward(model, u)
        y1 = layer_forward(LayerState.zeros(3), u, model.layers[0], 0.3, 1.0)[1]
        y2 = layer_forward(LayerState.zeros(3), y1, model.layers[1], 0.3, 1.0)[1]
        y3 = layer_forward(LayerState.zeros(3), y2, model.layers[2], 0.3, 1.0, skip=y1)[1]
        np.testing.assert_array_equal(out, y3)

    def test_mask_constant_over_time(self, rng):
        cfg = ModelConfig(L=2, m=50, d=1, dt=0.1, dropout=0.5)
        mask = DropoutMask.sample(cfg, rng)
        assert len(mask.masks) == 1
        assert set(np.unique(mask.masks[0])) <= {0.0, 2.0}

    def test_dropout_requires_mask(self, rng):
        model = init_params(ModelConfig(L=2, m=3, d=1, dt=0.1, dropout=0.2), 0)
        with pytest.raises(ConfigurationError, match="DropoutMask"):
            model_forward(model, np.zeros((4, 1)), train=True)

    def test_final_readout_shape(self, rng):
        model = init_params(ModelConfig(L=2, m=3, d=2, dt=0.1, out_dim=4, readout="final"), 0)
        out, _ = model_forward(model, rng.uniform(-1, 1, (9, 5, 2)))
        assert out.shape == (5, 4)

    def test_wrong_layer_shapes(self):
        good = init_params(ModelConfig(L=2, m=3, d=2, dt=0.1), 0)
        cfg3 = ModelConfig(L=2, m=3, d=4, dt=0.1)
        with pytest.raises(ConfigurationError, match="layer 1"):
            Model(cfg3, good.layers, good.readout_W, good.readout_b)


class TestMSE:
    def test_perfect(self, rng):
        p = rng.standard_normal((5, 2))
        loss, g = mse_loss(p, p)
        assert loss == 0.0
        np.testing.assert_array_equal(g, 0.0)

    def test_single_value(self):
        loss, g = mse_loss(np.array([[2.0]]), np.array([[0.0]]))
        assert loss == 2.0
        np.testing.assert_array_equal(g, [[2.0]])

    def test_brute_force(self, rng):
        p, t = rng.standard_normal((10, 3)), rng.standard_normal((10, 3))
        total = 0.0
        for n in range(10):
            for j in range(3):
                total += 0.5 * (p[n, j] - t[n, j]) ** 2
        loss, g = mse_loss(p, t)
        np.testing.assert_allclose(loss, total / 10, rtol=1e-14)
        np.testing.assert_allclose(g, (p - t) / 10, rtol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(np.zeros((3, 2)), np.zeros((3, 1)))


class TestCrossEntropy:
    def test_uniform(self):
        loss, g = cross_entropy_loss(np.zeros(4), 1)
        np.testing.assert_allclose(loss, 1.386294361, rtol=1e-9)
        np.testing.assert_allclose(loss, np.log(4.0), rtol=1e-15)
        np.testing.assert_allclose(g, [0.25, -0.75, 0.25, 0.25])

    def test_no_overflow(self):
        loss, g = cross_entropy_loss(np.array([1000.0, 0.0]), 0)
        assert np.isfinite(loss) and loss < 1e-300
        assert np.all(np.isfinite(g))

    def test_high_precision(self, rng):
        z = rng.normal(0, 3, 5)
        mpmath.mp.dps = 50
        exact = -(mpmath.mpf(z[2]) - mpmath.log(sum(mpmath.exp(mpmath.mpf(v)) for v in z)))
        loss, g = cross_entropy_loss(z, 2)
        np.testing.assert_allclose(loss, float(exact), rtol=1e-14)
        fd = [(cross_entropy_loss(z + e, 2)[0] - cross_entropy_loss(z - e, 2)[0]) / 2e-6
              for e in np.eye(5) * 1e-6]
        np.testing.assert_allclose(g, fd, atol=1e-9)

    def test_bad_label(self):
        with pytest.raises(ValueError, match="range"):
            cross_entropy_loss(np.zeros(3), 3)


class TestNRMSE:
    def test_exact(self, rng):
        t = rng.standard_normal((8, 2))
        assert nrmse(t, t) == 0.0
        np.testing.assert_allclose(nrmse(2 * t, t), 1.0, rtol=1e-15)

    def test_formula(self, rng):
        p, t = rng.standard_normal(20), rng.standard_normal(20)
        ref = np.sqrt(np.sum((p - t) ** 2) / 20) / np.sqrt(np.sum(t ** 2) / 20)
        np.testing.assert_allclose(nrmse(p, t), ref, rtol=1e-14)

    def test_zero_target(self):
        with pytest.raises(ValueError):
            nrmse(np.ones(3), np.zeros(3))
