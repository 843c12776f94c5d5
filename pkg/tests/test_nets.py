"""Networks: seeded init, the multi-head forward contract, bounded
adaptive temperatures, and checkpoint round-trips."""
import numpy as np
import pytest

from contrastlab import tensor as T
from contrastlab.errors import ContractViolation, DomainError
from contrastlab.nets import (Mlp, MlpSpec, ModelBundle, TempBounds, adaptive_temperature,
                              bounded_sigmoid, forward_views, load_bundle, save_bundle)
from contrastlab.tensor import Tensor, backward, finite_diff_check, grad_of, zero_grads

BOUNDS = TempBounds(1e-5, 2.0)


class TestInit:
    def test_same_seed_bitwise_identical(self):
        spec = MlpSpec((5, 8, 3))
        a = Mlp.init(spec, seed=42)
        b = Mlp.init(spec, seed=42)
        for pa, pb in zip(a.params, b.params):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_distinct_head_seeds_give_distinct_parameters(self):
        bundle = ModelBundle.build(d_in=6, d=8, d_prime=4, n_heads=3, seed=7)
        w0 = bundle.heads[0].params[0].data
        w1 = bundle.heads[1].params[0].data
        assert not np.array_equal(w0, w1)

    def test_he_uniform_variance(self):
        mlp = Mlp.init(MlpSpec((100, 100)), seed=3)
        w = mlp.params[0].data
        assert w.size == 10_000
        assert abs(w.var() / (2.0 / 100) - 1.0) < 0.2

    def test_biases_zero(self):
        mlp = Mlp.init(MlpSpec((4, 7, 2)), seed=1)
        np.testing.assert_array_equal(mlp.params[1].data, np.zeros(7))
        np.testing.assert_array_equal(mlp.params[3].data, np.zeros(2))

    def test_spec_validation(self):
        with pytest.raises(ContractViolation):
            MlpSpec((4,))
        with pytest.raises(ContractViolation):
            MlpSpec((4, 0, 2))


class TestMlpForward:
    def test_width_mismatch_rejected(self):
        mlp = Mlp.init(MlpSpec((4, 3)), seed=0)
        with pytest.raises(ContractViolation):
            mlp(Tensor(np.ones((2, 5))))

    def test_gradcheck_through_two_layers(self):
        mlp = Mlp.init(MlpSpec((4, 6, 3)), seed=9)
        x = Tensor(np.linspace(-1, 1, 8).reshape(2, 4))
        params = mlp.params + [x]
        assert finite_diff_check(lambda: T.sum_(T.mul(mlp(x), mlp(x))), params) < 1e-6


class TestForwardViews:
    def _bundle(self):
        return ModelBundle.build(d_in=6, d=8, d_prime=4, n_heads=3, seed=11)

    def test_identical_inputs_give_identical_projections(self):
        bundle = self._bundle()
        x = Tensor(np.linspace(0, 1, 12).reshape(2, 6))
        _, _, pairs = forward_views(bundle, x, Tensor(x.data.copy()))
        for z, z_pos in pairs:
            np.testing.assert_array_equal(z.data, z_pos.data)

    def test_projections_unit_norm(self):
        bundle = self._bundle()
        rng = np.random.default_rng(0)
        _, _, pairs = forward_views(bundle, Tensor(rng.normal(size=(5, 6))),
                                    Tensor(rng.normal(size=(5, 6))))
        for z, z_pos in pairs:
            np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), 1.0, atol=1e-12)
            np.testing.assert_allclose(np.linalg.norm(z_pos.data, axis=1), 1.0, atol=1e-12)

    def test_three_heads_give_three_distinct_pairs(self):
        bundle = self._bundle()
        rng = np.random.default_rng(1)
        _, _, pairs = forward_views(bundle, Tensor(rng.normal(size=(3, 6))),
                                    Tensor(rng.normal(size=(3, 6))))
        assert len(pairs) == 3
        for c in range(3):
            for c2 in range(c + 1, 3):
                assert not np.array_equal(pairs[c][0].data, pairs[c2][0].data)

    def test_batch_extent_mismatch_rejected(self):
        bundle = self._bundle()
        with pytest.raises(ContractViolation):
            forward_views(bundle, Tensor(np.ones((2, 6))), Tensor(np.ones((3, 6))))

    def test_head_independence(self):
        bundle = self._bundle()
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(4, 6)))
        _, _, before = forward_views(bundle, x, x)
        bundle.heads[1].params[0].data += 0.25
        _, _, after = forward_views(bundle, x, x)
        assert not np.array_equal(before[1][0].data, after[1][0].data)
        np.testing.assert_array_equal(before[0][0].data, after[0][0].data)
        np.testing.assert_array_equal(before[2][0].data, after[2][0].data)


class TestAdaptiveTemperature:
    def test_zero_inner_product_midpoint(self):
        # zeroed temperature net makes <phi(u), phi(v)> = 0 exactly
        temp_net = Mlp.init(MlpSpec((4, 4)), seed=0)
        temp_net.params[0].data[:] = 0.0
        tau = adaptive_temperature(Tensor([1.0, 0, 0, 0]), Tensor([0, 1.0, 0, 0]),
                                   temp_net, BOUNDS)
        np.testing.assert_allclose(tau.item(), 1.00001, atol=1e-12)

    def test_limits_approach_bounds(self):
        lo = bounded_sigmoid(Tensor(30.0), BOUNDS).item()
        hi = bounded_sigmoid(Tensor(-30.0), BOUNDS).item()
        assert BOUNDS.eta < lo < BOUNDS.eta + 1e-12
        assert BOUNDS.eta + BOUNDS.iota - 1e-12 < hi < BOUNDS.eta + BOUNDS.iota

    def test_saturated_value_rejected_at_emission(self):
        with pytest.raises(DomainError):
            bounded_sigmoid(Tensor(1000.0), BOUNDS)

    def test_strictly_decreasing_on_grid(self):
        grid = np.arange(-10.0, 11.0)
        values = bounded_sigmoid(Tensor(grid), BOUNDS).data
        assert np.all(np.diff(values) < 0)

    def test_emitted_range_strictly_inside(self):
        rng = np.random.default_rng(3)
        temp_net = Mlp.init(MlpSpec((4, 4)), seed=5)
        u = Tensor(rng.normal(size=(50, 4)))
        v = Tensor(rng.normal(size=(50, 4)))
        tau = adaptive_temperature(u, v, temp_net, BOUNDS)
        assert np.all(tau.data > BOUNDS.eta)
        assert np.all(tau.data < BOUNDS.eta + BOUNDS.iota)

    def test_width_mismatch_rejected(self):
        temp_net = Mlp.init(MlpSpec((4, 4)), seed=5)
        with pytest.raises(ContractViolation):
            adaptive_temperature(Tensor(np.ones(3)), Tensor(np.ones(3)), temp_net, BOUNDS)

    def test_differentiable_wrt_inputs_and_net(self):
        rng = np.random.default_rng(4)
        temp_net = Mlp.init(MlpSpec((4, 4)), seed=6)
        u = Tensor(rng.normal(size=4))
        v = Tensor(rng.normal(size=4))
        params = [u, v] + temp_net.params
        assert finite_diff_check(
            lambda: adaptive_temperature(u, v, temp_net, BOUNDS), params) < 1e-6

    def test_bounds_validation(self):
        with pytest.raises(ContractViolation):
            TempBounds(0.0, 1.0)
        with pytest.raises(ContractViolation):
            TempBounds(1e-5, 0.0)


class TestTempNetSharing:
    def test_gradient_accumulates_over_heads(self):
        """The shared net's gradient under the summed loss equals the sum
        of single-head gradients and is nonzero for generic inputs."""
        rng = np.random.default_rng(7)
        temp_net = Mlp.init(MlpSpec((4, 4)), seed=8)
        us = [Tensor(rng.normal(size=4)) for _ in range(3)]
        vs = [Tensor(rng.normal(size=4)) for _ in range(3)]

        def tau_sum(indices):
            total = None
            for c in indices:
                tau = adaptive_temperature(us[c], vs[c], temp_net, BOUNDS)
                total = tau if total is None else total + tau
            return total

        zero_grads(temp_net.params)
        backward(tau_sum(range(3)))
        full = [grad_of(p).copy() for p in temp_net.params]
        parts = []
        for c in range(3):
            zero_grads(temp_net.params)
            backward(tau_sum([c]))
            parts.append([grad_of(p).copy() for p in temp_net.params])
        for k, g_full in enumerate(full):
            np.testing.assert_allclose(g_full, sum(p[k] for p in parts), rtol=1e-10, atol=1e-12)
        assert any(np.abs(g).max() > 0 for g in full)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        bundle = ModelBundle.build(d_in=6, d=8, d_prime=4, n_heads=2, seed=21,
                                   with_predictor=True, bt_width=16)
        path = tmp_path / "ckpt.bin"
        save_bundle(bundle, path)
        loaded = load_bundle(path)
        assert loaded.n_heads == 2
        assert loaded.predictor is not None and loaded.temp_net_bt is not None
        for orig, back in zip(bundle.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(back.data, orig.data.astype(np.float32).astype(np.float64))

    def test_forward_agreement_after_reload(self, tmp_path):
        bundle = ModelBundle.build(d_in=6, d=8, d_prime=4, n_heads=1, seed=22)
        path = tmp_path / "ckpt.bin"
        save_bundle(bundle, path)
        loaded = load_bundle(path)
        x = Tensor(np.linspace(-1, 1, 6))
        np.testing.assert_allclose(loaded.encoder(x).data, bundle.encoder(x).data,
                                   rtol=1e-6, atol=1e-6)
