import numpy as np
import pytest

from unicornn.analysis import finite_difference_gradients, relative_error
from unicornn.backward import (layer_backward_reconstructing, layer_backward_stored,
                               model_backward)
from unicornn.core import (LayerParams, LayerState, ModelConfig, NumericalStabilityError,
                           StateMeter, layer_forward, sigma_hat)
from unicornn.model import Model, model_forward
from unicornn.train import init_params, loss_and_grads

from conftest import make_layer


class _LayerProbe:
    """Wraps one layer so the model-level FD helper can perturb it.

    The loss is the linear functional sum_n <g_n, y_n>, whose gradient is
    exactly what the backward sweep returns for upstream g.
    """

    def __init__(self, params, u, g, dt, alpha, initial=None):
        self.p, self.u, self.g, self.dt, self.alpha = params, u, g, dt, alpha
        self.initial = initial

    def parameters(self):
        return self.p.arrays()

    def loss(self, _):
        init = self.initial or LayerState.zeros(self.p.m)
        _, ys, _ = layer_forward(init.copy(), self.u, self.p, self.dt, self.alpha)
        return float(np.sum(self.g * ys))


def _layer_case(rng, m=6, d=3, N=25, dt=0.4, alpha=1.2, lam=False):
    p = make_layer(rng, m, d, lam=lam)
    u = rng.uniform(-1, 1, (N, d))
    g = rng.standard_normal((N, m))
    return p, u, g, dt, alpha


class TestStored:
    def test_zero_upstream(self, rng):
        p, u, _, dt, a = _layer_case(rng)
        _, _, tr = layer_forward(LayerState.zeros(6), u, p, dt, a, store=True)
        g = layer_backward_stored(tr, np.zeros((25, 6)), p, dt, a)
        for arr in g.arrays().values():
            np.testing.assert_array_equal(arr, 0.0)
        np.testing.assert_array_equal(g.x, 0.0)

    def test_single_step_closed_form(self):
        dt, c, V, b, u1 = 0.3, 0.2, 0.7, -0.1, 0.9
        p = LayerParams([0.4], [[V]], [b], [c])
        _, _, tr = layer_forward(LayerState.zeros(1), np.array([[u1]]), p, dt, 1.0, store=True)
        g = layer_backward_stored(tr, np.ones((1, 1)), p, dt, 1.0)
        s = sigma_hat(c)
        sp = 1.0 - np.tanh(V * u1 + b) ** 2
        np.testing.assert_array_equal(g.w, [0.0])
        np.testing.assert_allclose(g.b, [-dt ** 2 * s ** 2 * sp], rtol=1e-15)
        np.testing.assert_allclose(g.V, [[-dt ** 2 * s ** 2 * sp * u1]], rtol=1e-15)

    def test_matches_finite_differences(self, rng):
        p, u, gu, dt, a = _layer_case(rng)
        _, _, tr = layer_forward(LayerState.zeros(6), u, p, dt, a, store=True)
        g = layer_backward_stored(tr, gu, p, dt, a)
        probe = _LayerProbe(p, u, gu, dt, a)
        fd = finite_difference_gradients(probe.loss, probe, rel_step=1e-5)
        for name, arr in g.arrays().items():
            assert relative_error(arr, fd[name]) < 1e-6, name

    def test_input_gradient(self, rng):
        p, u, gu, dt, a = _layer_case(rng, N=8)
        _, _, tr = layer_forward(LayerState.zeros(6), u, p, dt, a, store=True)
        g = layer_backward_stored(tr, gu, p, dt, a)
        fd = np.zeros_like(u)
        for idx in np.ndindex(u.shape):
            up, um = u.copy(), u.copy()
            up[idx] += 1e-6
            um[idx] -= 1e-6
            f = lambda x: np.sum(gu * layer_forward(LayerState.zeros(6), x, p, dt, a)[1])
            fd[idx] = (f(up) - f(um)) / 2e-6
        assert relative_error(g.x, fd) < 1e-6

    def test_initial_state_adjoint(self, rng):
        p, u, gu, dt, a = _layer_case(rng, N=10)
        y0, z0 = rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6)
        _, _, tr = layer_forward(LayerState(y0, z0), u, p, dt, a, store=True)
        g = layer_backward_stored(tr, gu, p, dt, a)
        f = lambda y, z: np.sum(gu * layer_forward(LayerState(y, z), u, p, dt, a)[1])
        e = np.eye(6) * 1e-6
        fy = [(f(y0 + e[i], z0) - f(y0 - e[i], z0)) / 2e-6 for i in range(6)]
        fz = [(f(y0, z0 + e[i]) - f(y0, z0 - e[i])) / 2e-6 for i in range(6)]
        assert relative_error(g.initial.delta_y, fy) < 1e-6
        assert relative_error(g.initial.delta_z, fz) < 1e-6


class TestReconstructing:
    def test_matches_stored(self, rng):
        p, u, gu, dt, a = _layer_case(rng)
        final, _, tr = layer_forward(LayerState.zeros(6), u, p, dt, a, store=True)
        gs = layer_backward_stored(tr, gu, p, dt, a)
        gr = layer_backward_reconstructing(final, u, gu, p, dt, a)
        for name, arr in gs.arrays().items():
            assert relative_error(gr.arrays()[name], arr) < 1e-7, name
        assert relative_error(gr.x, gs.x) < 1e-7

    def test_batched_with_skip(self, rng):
        p = make_layer(rng, 5, 5, lam=True)
        u = rng.uniform(-1, 1, (30, 3, 5))
        sk = rng.uniform(-1, 1, (30, 3, 5))
        gu = rng.standard_normal((30, 3, 5))
        final, _, tr = layer_forward(LayerState.zeros(5, 3), u, p, 0.3, 1.0, store=True, skip=sk)
        gs = layer_backward_stored(tr, gu, p, 0.3, 1.0)
        gr = layer_backward_reconstructing(final, u, gu, p, 0.3, 1.0, skip=sk)
        for name in ("w", "V", "b", "c", "lam"):
            assert relative_error(gr.arrays()[name], gs.arrays()[name]) < 1e-7, name
        assert relative_error(gr.skip, gs.skip) < 1e-7

    def test_zero_upstream(self, rng):
        p, u, _, dt, a = _layer_case(rng)
        final, _, _ = layer_forward(LayerState.zeros(6), u, p, dt, a)
        g = layer_backward_reconstructing(final, u, np.zeros((25, 6)), p, dt, a)
        for arr in g.arrays().values():
            np.testing.assert_array_equal(arr, 0.0)

    def test_peak_state_independent_of_length(self, rng):
        p = make_layer(rng, 8, 3)
        peaks = []
        for N in (100, 1000):
            u = rng.uniform(-1, 1, (N, 4, 3))
            meter = StateMeter()
            final, _, _ = layer_forward(LayerState.zeros(8, 4), u, p, 0.1, 1.0, meter=meter)
            layer_backward_reconstructing(final, u, rng.standard_normal((N, 4, 8)), p, 0.1, 1.0,
                                          meter=meter)
            peaks.append(meter.peak)
        assert peaks[0] == peaks[1]

    def test_drift_is_reported(self, rng):
        p = make_layer(rng, 3, 2)
        u = rng.uniform(-1, 1, (20, 2))
        bogus = LayerState(np.full(3, 1e7), np.full(3, 1e7))
        with pytest.raises(NumericalStabilityError, match="exceeded"):
            layer_backward_reconstructing(bogus, u, np.ones((20, 3)), p, 0.9, 50.0)


def _fd_model_check(model, x, t, tol, loss="mse"):
    value, grads = loss_and_grads(model, x, t, loss)

    def f(mdl):
        return loss_and_grads(mdl, x, t, loss)[0]

    fd = finite_difference_gradients(f, model, rel_step=1e-5)
    worst = max(relative_error(grads[k], fd[k]) for k in grads)
    assert worst < tol, worst


class TestModelBackward:
    def test_single_layer_reduces_to_layer_sweep(self, rng):
        cfg = ModelConfig(L=1, m=5, d=2, dt=0.3, out_dim=5)
        model = init_params(cfg, 3)
        u = rng.uniform(-1, 1, (12, 2, 2))
        up = rng.standard_normal((12, 2, 5))
        _, cache = model_forward(model, u)
        g = model_backward(model, cache, up)[0]
        p = model.layers[0]
        final, _, _ = layer_forward(LayerState.zeros(5, 2), u, p, 0.3, 1.0)
        ref = layer_backward_reconstructing(final, u, up, p, 0.3, 1.0)
        for name, arr in ref.arrays().items():
            np.testing.assert_array_equal(g.arrays()[name], arr)

    def test_three_layers_fd(self, rng):
        cfg = ModelConfig(L=3, m=4, d=2, dt=0.6, alpha=1.0, out_dim=2)
        model = init_params(cfg, 0)
        for p in model.layers:
            p.V[:] = rng.uniform(-1, 1, p.V.shape)
        x = rng.uniform(-1, 1, (10, 2, 2))
        t = rng.uniform(-1, 1, (10, 2, 2))
        _fd_model_check(model, x, t, 1e-5)

    def test_residual_fd_includes_lambda(self, rng):
        cfg = ModelConfig(L=5, m=3, d=2, dt=0.7, alpha=1.0, skip=2, out_dim=2)
        model = init_params(cfg, 1)
        for p in model.layers:
            p.V[:] = rng.uniform(-1, 1, p.V.shape)
            if p.lam is not None:
                p.lam[:] = rng.uniform(-1, 1, p.lam.shape)
        assert [p.lam is not None for p in model.layers] == [False, False, True, True, True]
        x = rng.uniform(-1, 1, (8, 2, 2))
        t = rng.uniform(-1, 1, (8, 2, 2))
        _fd_model_check(model, x, t, 1e-5)

    def test_stored_and_reconstructing_agree(self, rng):
        cfg = ModelConfig(L=3, m=4, d=2, dt=0.2, skip=2, out_dim=1)
        model = init_params(cfg, 2)
        x = rng.uniform(-1, 1, (40, 3, 2))
        up = rng.standard_normal((40, 3, 4))
        _, cache = model_forward(model, x, store=True)
        gs = model_backward(model, cache, up, reconstruct=False)
        gr = model_backward(model, cache, up, reconstruct=True)
        for a, b in zip(gs, gr):
            for name, arr in a.arrays().items():
                assert relative_error(b.arrays()[name], arr) < 1e-7
