import math
import unittest

import numpy as np

from tools.feature_dataset import SyntheticConfig, generate_synthetic
from tools.residual_fusion import (
    FusionConfig,
    GateParams,
    StaleCacheError,
    channel_attention,
    fuse,
    fuse_backward,
    residual,
)


def _numeric_grad(fn, x, step):
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn()
        flat[i] = original - step
        minus = fn()
        flat[i] = original
        out[i] = (plus - minus) / (2 * step)
    return grad


def _rel_error(a, b):
    return float(np.max(np.abs(a - b))) / max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-8)


class ResidualTests(unittest.TestCase):
    def test_worked_examples(self):
        v = np.array([0.3, -1.2, 2.0])
        np.testing.assert_array_equal(residual(v, v, v), np.zeros(3))
        np.testing.assert_array_equal(residual([1.0, 0.0], [0.0, 1.0], [0.5, 0.5]), [0.0, 0.0])
        np.testing.assert_array_equal(residual([1.0, 2.0], [3.0, 4.0], [1.0, 1.0]), [2.0, 4.0])

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            residual(np.zeros(3), np.zeros(3), np.zeros(4))


class ChannelAttentionTests(unittest.TestCase):
    def test_symmetric_inputs_are_uniform(self):
        np.testing.assert_allclose(channel_attention(np.array([1.0, 1.0])), [0.5, 0.5])
        np.testing.assert_allclose(channel_attention(np.full(5, 3.7), FusionConfig(tau_attn=0.3)), np.full(5, 0.2))

    def test_sum_scaled_softmax(self):
        expected = [math.e / (math.e + 1.0), 1.0 / (math.e + 1.0)]
        np.testing.assert_allclose(channel_attention(np.array([2.0, 0.0])), expected, atol=1e-6)

    def test_probability_vector_for_awkward_sums(self):
        rng = np.random.default_rng(0)
        batch = rng.standard_normal((50, 6))
        batch[0] = [1.0, -1.0, 0.0, 0.0, 0.0, 0.0]
        weights = channel_attention(batch)
        self.assertTrue(np.all(np.isfinite(weights)))
        self.assertTrue(np.all(weights >= 0))
        np.testing.assert_allclose(weights.sum(axis=1), np.ones(50), atol=1e-6)


class FuseTests(unittest.TestCase):
    def test_worked_two_channel_case(self):
        fused, _ = fuse([1.0, 2.0], [3.0, 4.0], [1.0, 1.0], GateParams.zeros(2))
        np.testing.assert_allclose(fused, [1.5, 2.0])

    def test_zero_gate_gives_half_residual(self):
        rng = np.random.default_rng(1)
        f_s, f_t, f_st = (rng.random((4, 3)) + 0.1 for _ in range(3))
        fused, cache = fuse(f_s, f_t, f_st, GateParams.zeros(3))
        np.testing.assert_allclose(cache.gate, np.full((4, 3), 0.5))
        np.testing.assert_allclose(fused, f_st + 0.5 * residual(f_s, f_t, f_st) * channel_attention(f_st))

    def test_zero_residual_is_a_no_op_for_any_gate(self):
        ds = generate_synthetic(SyntheticConfig(noise_sigma=0.0, samples_per_class=3))
        rng = np.random.default_rng(5)
        gate = GateParams(W=rng.standard_normal((ds.dim, ds.dim)), b=rng.standard_normal(ds.dim))
        fused, _ = fuse(ds.f_s, ds.f_t, ds.f_st, gate)
        np.testing.assert_array_equal(fused, ds.f_st)

    def test_gate_is_monotone_per_channel(self):
        rng = np.random.default_rng(6)
        f_s, f_t, f_st = (rng.standard_normal((8, 5)) for _ in range(3))
        gate = GateParams(W=rng.standard_normal((5, 5)), b=rng.standard_normal(5))
        _, base = fuse(f_s, f_t, f_st, gate)
        for channel in range(5):
            for delta in (1e-3, 0.5, 4.0):
                b = gate.b.copy()
                b[channel] += delta
                _, bumped = fuse(f_s, f_t, f_st, GateParams(W=gate.W, b=b))
                self.assertTrue(np.all(bumped.gate[:, channel] > base.gate[:, channel]))
                others = np.arange(5) != channel
                np.testing.assert_array_equal(bumped.gate[:, others], base.gate[:, others])

    def test_gate_shape_is_checked(self):
        with self.assertRaises(ValueError):
            fuse(np.zeros(3), np.zeros(3), np.zeros(3), GateParams.zeros(4))


class FuseBackwardTests(unittest.TestCase):
    def test_zero_upstream_gives_zero_gradients(self):
        rng = np.random.default_rng(2)
        _, cache = fuse(rng.random(4), rng.random(4), rng.random(4), GateParams.zeros(4))
        for grad in fuse_backward(cache, np.zeros(4)):
            np.testing.assert_array_equal(grad, np.zeros_like(grad))

    def test_zero_residual_leaves_gate_untouched(self):
        f_st = np.array([0.2, 0.7, 0.1])
        _, cache = fuse(f_st, f_st, f_st, GateParams.zeros(3))
        _, _, _, grad_W, grad_b = fuse_backward(cache, np.array([1.0, -2.0, 0.5]))
        np.testing.assert_array_equal(grad_W, np.zeros((3, 3)))
        np.testing.assert_array_equal(grad_b, np.zeros(3))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        f_s, f_t = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
        f_st = rng.random((3, 5)) + 0.2
        gate = GateParams(W=0.3 * rng.standard_normal((5, 5)), b=0.1 * rng.standard_normal(5))
        upstream = rng.standard_normal((3, 5))
        cfg = FusionConfig(tau_attn=0.7)

        def objective():
            return float(np.sum(upstream * fuse(f_s, f_t, f_st, gate, cfg)[0]))

        _, cache = fuse(f_s, f_t, f_st, gate, cfg)
        analytic = fuse_backward(cache, upstream)
        numeric = [_numeric_grad(objective, x, 1e-6) for x in (f_s, f_t, f_st, gate.W, gate.b)]
        for got, want in zip(analytic, numeric):
            self.assertLess(_rel_error(got, want), 1e-6)

    def test_matches_finite_differences_across_shapes(self):
        rng = np.random.default_rng(11)
        for dim in (2, 5, 16):
            for _ in range(100):
                f_s, f_t = rng.standard_normal(dim), rng.standard_normal(dim)
                f_st = rng.random(dim) + 0.2
                gate = GateParams(W=0.3 * rng.standard_normal((dim, dim)), b=0.1 * rng.standard_normal(dim))
                upstream = rng.standard_normal(dim)
                cfg = FusionConfig(tau_attn=float(rng.uniform(0.5, 2.0)))

                def objective():
                    return float(np.sum(upstream * fuse(f_s, f_t, f_st, gate, cfg)[0]))

                _, cache = fuse(f_s, f_t, f_st, gate, cfg)
                analytic = fuse_backward(cache, upstream)
                numeric = [_numeric_grad(objective, x, 1e-6) for x in (f_s, f_t, f_st, gate.W, gate.b)]
                for got, want in zip(analytic, numeric):
                    self.assertLess(_rel_error(got, want), 1e-5, msg=f"dim={dim}")

    def test_mismatched_cache_is_rejected(self):
        _, cache = fuse(np.ones((2, 3)), np.ones((2, 3)), np.ones((2, 3)), GateParams.zeros(3))
        with self.assertRaises(StaleCacheError):
            fuse_backward(cache, np.ones((3, 3)))


if __name__ == "__main__":
    unittest.main()
