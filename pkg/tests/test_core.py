import mpmath
import numpy as np
import pytest

from unicornn.core import (ConfigurationError, LayerParams, LayerState, ModelConfig, StateMeter,
                           forward_step, hamiltonian, input_transform, inverse_step,
                           layer_forward, sigma_hat, sigma_hat_prime)

from conftest import make_layer, random_state


class TestSigmaHat:
    def test_zero(self):
        assert sigma_hat(0.0) == 0.5

    def test_symmetry_sums_to_one(self, rng):
        u = rng.uniform(-30, 30, 1000)
        np.testing.assert_array_equal(sigma_hat(u) + sigma_hat(-u), 1.0)

    def test_value_at_two(self):
        exact = float(mpmath.mpf("0.5") + mpmath.mpf("0.5") * mpmath.tanh(1))
        np.testing.assert_allclose(sigma_hat(2.0), 0.8807970779778823, rtol=2e-16)
        np.testing.assert_allclose(sigma_hat(2.0), exact, rtol=2e-16)

    def test_range(self, rng):
        s = sigma_hat(rng.uniform(-20, 20, 1000))
        assert np.all((s > 0) & (s < 1))

    def test_derivative(self, rng):
        u = rng.uniform(-4, 4, 50)
        h = 1e-6
        fd = (sigma_hat(u + h) - sigma_hat(u - h)) / (2 * h)
        np.testing.assert_allclose(sigma_hat_prime(u), fd, rtol=1e-8)


class TestValidation:
    def test_v_rows_must_match(self):
        with pytest.raises(ConfigurationError, match="V has shape"):
            LayerParams(np.ones(3), np.ones((2, 2)), np.zeros(3), np.zeros(3))

    def test_lam_shape(self):
        with pytest.raises(ConfigurationError, match="lam"):
            LayerParams(np.ones(3), np.ones((3, 2)), np.zeros(3), np.zeros(3), np.ones((3, 2)))

    def test_non_finite(self):
        with pytest.raises(ConfigurationError, match="non-finite"):
            LayerParams(np.array([np.nan]), np.ones((1, 1)), np.zeros(1), np.zeros(1))

    def test_state_shapes(self):
        with pytest.raises(ConfigurationError):
            LayerState(np.zeros(3), np.zeros(4))

    @pytest.mark.parametrize("kw", [
        dict(dt=1.0), dict(dt=0.0), dict(dt=-0.1), dict(alpha=-1.0), dict(L=0),
        dict(m=0), dict(skip=1), dict(skip=3), dict(dt=[0.1, 0.1]),
    ])
    def test_model_config_rejects(self, kw):
        base = dict(L=3, m=4, d=2, dt=0.1)
        base.update(kw)
        with pytest.raises(ConfigurationError):
            ModelConfig(**base)

    def test_model_config_dims(self):
        cfg = ModelConfig(L=5, m=4, d=2, dt=0.1, skip=2)
        assert [cfg.layer_input_dim(l) for l in range(5)] == [2, 4, 4, 4, 4]
        assert [cfg.has_skip(l) for l in range(5)] == [False, False, True, True, True]
        assert cfg.dt == [0.1] * 5


class TestForwardStep:
    def test_origin_is_fixed(self, rng):
        p = make_layer(rng, 5, 3)
        p.b[:] = 0.0
        s = forward_step(LayerState.zeros(5), p, np.zeros(3), 0.3, 2.0)
        np.testing.assert_array_equal(s.y, 0.0)
        np.testing.assert_array_equal(s.z, 0.0)

    def test_hand_example(self):
        p = LayerParams([0.0], [[1.0]], [0.0], [0.0])
        s = forward_step(LayerState.zeros(1), p, np.array([0.5]), 0.1, 0.0)
        # reference values are quoted to 10 significant digits
        np.testing.assert_allclose(s.z, [-0.02310585786], rtol=0, atol=5e-12)
        np.testing.assert_allclose(s.y, [-0.001155292893], rtol=0, atol=5e-13)
        exact_z = -0.05 * float(mpmath.tanh(0.5))
        np.testing.assert_allclose(s.z, [exact_z], rtol=1e-15)
        np.testing.assert_allclose(s.y, [0.05 * exact_z], rtol=1e-15)

    def test_batched_matches_rows(self, rng):
        p = make_layer(rng, 4, 2)
        st = random_state(rng, 4, batch=3)
        x = rng.uniform(-1, 1, (3, 2))
        out = forward_step(st, p, x, 0.2, 1.5)
        for b in range(3):
            row = forward_step(LayerState(st.y[b], st.z[b]), p, x[b], 0.2, 1.5)
            np.testing.assert_array_equal(out.y[b], row.y)
            np.testing.assert_array_equal(out.z[b], row.z)

    def test_width_mismatch(self, rng):
        p = make_layer(rng, 4, 2)
        with pytest.raises(ConfigurationError):
            forward_step(LayerState.zeros(3), p, np.zeros(2), 0.1, 1.0)


class TestInverseStep:
    def test_round_trip(self, rng):
        for _ in range(20):
            p = make_layer(rng, 6, 3)
            s = random_state(rng, 6)
            x = rng.uniform(-1, 1, 3)
            back = inverse_step(forward_step(s, p, x, 0.5, 1.3), p, x, 0.5, 1.3)
            np.testing.assert_allclose(back.y, s.y, rtol=0, atol=1e-12)
            np.testing.assert_allclose(back.z, s.z, rtol=0, atol=1e-12)

    def test_round_trip_with_skip(self, rng):
        p = make_layer(rng, 4, 4, lam=True)
        s = random_state(rng, 4)
        x, sk = rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4)
        back = inverse_step(forward_step(s, p, x, 0.3, 1.0, sk), p, x, 0.3, 1.0, sk)
        np.testing.assert_allclose(back.y, s.y, atol=1e-12)
        np.testing.assert_allclose(back.z, s.z, atol=1e-12)

    def test_zero_state(self, rng):
        p = make_layer(rng, 3, 2)
        p.b[:] = 0.0
        s = inverse_step(LayerState.zeros(3), p, np.zeros(2), 0.1, 1.0)
        np.testing.assert_array_equal(s.y, 0.0)
        np.testing.assert_array_equal(s.z, 0.0)

    def test_long_chain_from_final_state(self, rng):
        p = make_layer(rng, 16, 4)
        u = rng.uniform(-1, 1, (1000, 4))
        final, _, traj = layer_forward(LayerState.zeros(16), u, p, 0.1, 1.0, store=True)
        s = final
        err = 0.0
        for n in range(1000, 0, -1):
            s = inverse_step(s, p, u[n - 1], 0.1, 1.0)
            err = max(err, np.abs(s.y - traj.y[n - 1]).max(), np.abs(s.z - traj.z[n - 1]).max())
        assert err < 1e-9


class TestLayerForward:
    def test_zero_inputs(self, rng):
        p = make_layer(rng, 4, 2)
        p.b[:] = 0.0
        final, ys, _ = layer_forward(LayerState.zeros(4), np.zeros((3, 2)), p, 0.1, 1.0)
        np.testing.assert_array_equal(ys, 0.0)
        np.testing.assert_array_equal(final.z, 0.0)

    def test_store_flag_is_bitwise_neutral(self, rng):
        p = make_layer(rng, 8, 3)
        u = rng.uniform(-1, 1, (40, 5, 3))
        f1, ys1, _ = layer_forward(LayerState.zeros(8, 5), u, p, 0.2, 1.0, store=False)
        f2, ys2, tr = layer_forward(LayerState.zeros(8, 5), u, p, 0.2, 1.0, store=True)
        np.testing.assert_array_equal(ys1, ys2)
        np.testing.assert_array_equal(f1.z, f2.z)
        np.testing.assert_array_equal(tr.y[1:], ys2)

    def test_composition_of_steps(self, rng):
        p = make_layer(rng, 8, 3)
        u = rng.uniform(-1, 1, (50, 3))
        s0 = random_state(rng, 8)
        final, ys, tr = layer_forward(s0, u, p, 0.15, 0.7, store=True)
        s = s0
        for n in range(50):
            s = forward_step(s, p, u[n], 0.15, 0.7)
            np.testing.assert_allclose(tr.y[n + 1], s.y, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(final.y, s.y, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(final.z, s.z, rtol=1e-13, atol=1e-15)

    def test_precomputed_transform(self, rng):
        p = make_layer(rng, 4, 2)
        u = rng.uniform(-1, 1, (10, 2))
        a = layer_forward(LayerState.zeros(4), u, p, 0.1, 1.0)[1]
        b = layer_forward(LayerState.zeros(4), u, p, 0.1, 1.0, ax=input_transform(p, u))[1]
        np.testing.assert_array_equal(a, b)

    def test_thread_count_does_not_change_result(self, rng):
        from unicornn import _kernels
        p = make_layer(rng, 7, 2)
        u = rng.uniform(-1, 1, (30, 5, 2))
        ref = layer_forward(LayerState.zeros(7, 5), u, p, 0.1, 1.0)[1]
        old = _kernels.get_num_threads()
        try:
            _kernels.set_num_threads(3)
            got = layer_forward(LayerState.zeros(7, 5), u, p, 0.1, 1.0)[1]
        finally:
            _kernels.set_num_threads(old)
        np.testing.assert_array_equal(ref, got)

    def test_empty_sequence(self, rng):
        p = make_layer(rng, 4, 2)
        with pytest.raises(ConfigurationError):
            layer_forward(LayerState.zeros(4), np.zeros((0, 2)), p, 0.1, 1.0)

    def test_meter_counts_only_live_state(self, rng):
        p = make_layer(rng, 4, 2)
        peaks = []
        for N in (10, 100):
            meter = StateMeter()
            layer_forward(LayerState.zeros(4, 3), rng.uniform(-1, 1, (N, 3, 2)), p, 0.1, 1.0,
                          meter=meter)
            peaks.append(meter.peak)
        assert peaks[0] == peaks[1] == 2 * 4 * 3


class TestHamiltonian:
    def test_zero(self, rng):
        p = make_layer(rng, 3, 2)
        p.b[:] = 0.0
        assert hamiltonian(LayerState.zeros(3), p, np.zeros(2), 1.0) == 0.0

    def test_kinetic_only(self):
        p = LayerParams([1.0], [[1.0]], [0.0], [0.0])
        np.testing.assert_allclose(hamiltonian(LayerState([0.0], [1.0]), p, [0.0], 2.0), 0.5)

    def test_potential(self):
        p = LayerParams([2.0], [[1.0]], [0.0], [0.0])
        # 0.5 + 0.5 log cosh(2); log cosh(2) = 1.3250027473578644...
        exact = 0.5 + 0.5 * float(mpmath.log(mpmath.cosh(2)))
        got = hamiltonian(LayerState([1.0], [0.0]), p, [0.0], 1.0)
        np.testing.assert_allclose(got, 1.1625013736789322, rtol=1e-15)
        np.testing.assert_allclose(got, exact, rtol=1e-15)

    def test_large_argument_is_finite(self):
        p = LayerParams([1.0], [[1.0]], [0.0], [0.0])
        assert np.isfinite(hamiltonian(LayerState([1000.0], [0.0]), p, [0.0], 1.0))

    def test_zero_w_rejected(self):
        p = LayerParams([0.0], [[1.0]], [0.0], [0.0])
        with pytest.raises(ValueError, match="w\\[0\\]"):
            hamiltonian(LayerState([0.0], [0.0]), p, [0.0], 1.0)
