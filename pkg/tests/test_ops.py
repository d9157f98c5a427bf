import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evpnet import ops
from evpnet.tensor import Tape, Tensor


def naive_conv(x, w, b=None, stride=1, padding=0):
    """Direct seven-loop cross-correlation."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[a, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[a, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def grad_of(fn, *tensors):
    with Tape() as tape:
        loss = fn()
    return tape.grad(loss, tensors)


class TestConv2d:
    @pytest.mark.parametrize("k,stride,padding", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (5, 1, 2), (3, 1, 0)])
    def test_matches_naive_loop(self, rng, k, stride, padding):
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
        np.testing.assert_allclose(got, naive_conv(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)

    def test_same_padding_keeps_size(self, rng):
        out = ops.conv2d(Tensor(rng.standard_normal((1, 2, 6, 5))), Tensor(rng.standard_normal((3, 2, 3, 3))),
                         padding=1)
        assert out.shape == (1, 3, 6, 5)

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 1, 4, 4))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w), padding=1).data, x)

    def test_channel_mismatch_is_descriptive(self, rng):
        with pytest.raises(ValueError, match="3 channels but weight expects 2"):
            ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ValueError, match="larger"):
            ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_weight_gradient_is_input_correlation(self, rng):
        # d/dw sum(conv(x, w)) = sum of every kxk window of x.
        x = rng.standard_normal((2, 1, 5, 5))
        w = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
        (gw,) = grad_of(lambda: ops.sum(ops.conv2d(Tensor(x), w)), w)
        expect = np.array([[x[:, 0, u : u + 3, v : v + 3].sum() for v in range(3)] for u in range(3)])
        np.testing.assert_allclose(gw[0, 0], expect, rtol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-3, 3))
    def test_linear_in_input(self, seed, a):
        r = np.random.default_rng(seed)
        x, y = r.standard_normal((2, 1, 2, 5, 5))
        w = Tensor(r.standard_normal((3, 2, 3, 3)))
        lhs = ops.conv2d(Tensor(a * x + y), w, padding=1).data
        rhs = a * ops.conv2d(Tensor(x), w, padding=1).data + ops.conv2d(Tensor(y), w, padding=1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestDepthwise:
    @pytest.mark.parametrize("stride", [1, 2])
    def test_equals_grouped_dense_conv(self, rng, stride):
        # A depthwise conv is a dense conv with a block-diagonal weight.
        c = 3
        x = rng.standard_normal((2, c, 6, 6))
        w = rng.standard_normal((c, 1, 3, 3))
        dense = np.zeros((c, c, 3, 3))
        for i in range(c):
            dense[i, i] = w[i, 0]
        got = ops.depthwise_conv2d(Tensor(x), Tensor(w), stride, 1).data
        np.testing.assert_allclose(got, naive_conv(x, dense, None, stride, 1), rtol=1e-12, atol=1e-12)

    def test_rejects_wrong_channel_count(self):
        with pytest.raises(ValueError, match="does not match"):
            ops.depthwise_conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 1, 3, 3))))


class TestElementwise:
    def test_maximum_tie_routes_to_first(self):
        a = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        b = Tensor(np.array([1.0, 5.0, 0.0]), requires_grad=True)
        ga, gb = grad_of(lambda: ops.sum(ops.maximum(a, b)), a, b)
        np.testing.assert_array_equal(ga, [1, 0, 1])
        np.testing.assert_array_equal(gb, [0, 1, 0])

    def test_minimum_tie_routes_to_first(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        b = Tensor(np.array([1.0, 0.0]), requires_grad=True)
        ga, gb = grad_of(lambda: ops.sum(ops.minimum(a, b)), a, b)
        np.testing.assert_array_equal(ga, [1, 0])
        np.testing.assert_array_equal(gb, [0, 1])

    def test_abs_subgradient_at_zero_is_zero(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True)
        (g,) = grad_of(lambda: ops.sum(ops.abs(x)), x)
        np.testing.assert_array_equal(g, [-1, 0, 1])

    def test_maximum_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            ops.maximum(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_broadcast_gradient_reduces(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((1, 3)), requires_grad=True)
        _, gb = grad_of(lambda: ops.sum(ops.mul(a, b)), a, b)
        np.testing.assert_array_equal(gb, [[2, 2, 2]])

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = ops.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


class TestPoolingAndLoss:
    def test_avg_pool_values(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(ops.avg_pool2d(Tensor(x), 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_cross_entropy_matches_direct_formula(self, rng):
        z = rng.standard_normal((5, 4)) * 3
        y = rng.integers(0, 4, 5)
        direct = -np.mean(np.log(np.exp(z[np.arange(5), y]) / np.exp(z).sum(axis=1)))
        np.testing.assert_allclose(float(ops.softmax_cross_entropy(Tensor(z), y).data), direct, rtol=1e-12)

    def test_cross_entropy_shift_invariant_and_large_logits(self):
        z = np.array([[1000.0, 0.0], [0.0, 1000.0]])
        loss = float(ops.softmax_cross_entropy(Tensor(z), [0, 1]).data)
        assert loss == 0.0

    def test_cross_entropy_label_range(self):
        with pytest.raises(ValueError, match="labels"):
            ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


class TestBatchNorm:
    def test_train_mode_normalizes_and_updates_unbiased(self, rng):
        x = rng.standard_normal((4, 2, 3, 3)) * 3 + 1
        stats = ops.RunningStats(2, np.float64)
        out = ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, train=True)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, rtol=1e-4)
        m = 4 * 9
        np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
        np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1), rtol=1e-12)

    def test_eval_mode_uses_running_stats(self):
        stats = ops.RunningStats(1, np.float64)
        stats.mean[:] = 2.0
        stats.var[:] = 4.0 - 1e-5
        stats.updated = True
        out = ops.batch_norm(Tensor(np.full((1, 1, 1, 1), 6.0)), Tensor(np.ones(1)), Tensor(np.zeros(1)), stats,
                             train=False)
        np.testing.assert_allclose(out.data, 2.0)

    def test_eval_before_training_warns(self):
        stats = ops.RunningStats(1)
        with pytest.warns(RuntimeWarning, match="before any training step"):
            ops.batch_norm(Tensor(np.zeros((1, 1, 2, 2), np.float32)), Tensor(np.ones(1, np.float32)),
                           Tensor(np.zeros(1, np.float32)), stats, train=False)
