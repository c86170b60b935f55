import numpy as np
import pytest

from clenet import layers
from clenet.layers import ConvParams, DenseParams
from clenet.tensor import Rng


def rand(rng, shape, lo=-1.0, hi=1.0):
    return rng.uniform_array(int(np.prod(shape)), lo, hi).reshape(shape)


def rand_int(rng, shape, lo=-4, hi=5):
    # integer-valued float64 tensors: products and sums are exact, so any
    # summation order gives bit-identical results
    u = rng.uniform_array(int(np.prod(shape)), lo, hi)
    return np.floor(u).reshape(shape)


def conv_oracle(x, w, b, stride):
    """Direct six-nested-loop convolution."""
    n, in_c, h, wd = x.shape
    out_c, _, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    out = np.zeros((n, out_c, oh, ow))
    for bi in range(n):
        for o in range(out_c):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for c in range(in_c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[bi, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[bi, o, i, j] = acc
    return out


class TestConvForward:
    def test_identity_1x1_kernel(self):
        x = rand(Rng(1), (2, 1, 4, 4))
        p = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(layers.conv_forward(x, p, 1), x)

    def test_zero_weights_bias_only(self):
        x = rand(Rng(2), (1, 2, 5, 5))
        p = ConvParams(np.zeros((3, 2, 2, 2)), np.full(3, 0.5))
        out = layers.conv_forward(x, p, 1)
        assert (out == 0.5).all()

    def test_hand_computed_2x2(self):
        x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        p = ConvParams(np.ones((1, 1, 2, 2)), np.zeros(1))
        out = layers.conv_forward(x, p, 1)
        np.testing.assert_array_equal(out[0, 0], [[12, 16], [24, 28]])

    def test_matches_nested_loop_oracle_bitwise_on_integer_tensors(self):
        for seed in range(6):
            rng = Rng(seed)
            x = rand_int(rng, (2, 2, 6, 7))
            w = rand_int(rng, (3, 2, 3, 2))
            b = rand_int(rng, (3,))
            p = ConvParams(w, b)
            for stride in (1, 2):
                got = layers.conv_forward(x, p, stride)
                want = conv_oracle(x, w, b, stride)
                assert (np.asarray(got) == want).all()

    def test_matches_oracle_on_float_tensors(self):
        rng = Rng(33)
        x = rand(rng, (1, 3, 5, 5))
        p = ConvParams(rand(rng, (2, 3, 3, 3)), rand(rng, (2,)))
        got = layers.conv_forward(x, p, 1)
        np.testing.assert_allclose(got, conv_oracle(x, p.w, p.b, 1), rtol=1e-13)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            layers.conv_forward(np.zeros((1, 2, 4, 4)),
                                ConvParams(np.ones((1, 3, 2, 2)), np.zeros(1)), 1)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ValueError):
            layers.conv_forward(np.zeros((1, 1, 2, 2)),
                                ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1)), 1)


class TestConvBackward:
    def test_zero_grad_out_gives_zero_grads(self):
        rng = Rng(5)
        x = rand(rng, (1, 2, 5, 5))
        p = ConvParams(rand(rng, (2, 2, 3, 3)), rand(rng, (2,)))
        dx, dw, db = layers.conv_backward(x, p, np.zeros((1, 2, 3, 3)), 1)
        assert (dx == 0).all() and (dw == 0).all() and (db == 0).all()

    def test_scalar_chain_rule(self):
        x = np.full((1, 1, 1, 1), 3.0)
        p = ConvParams(np.full((1, 1, 1, 1), 2.0), np.zeros(1))
        g = np.full((1, 1, 1, 1), 5.0)
        dx, dw, db = layers.conv_backward(x, p, g, 1)
        assert dw.item() == 15.0 and dx.item() == 10.0 and db.item() == 5.0

    def test_grad_shape_mismatch(self):
        x = np.zeros((1, 1, 4, 4))
        p = ConvParams(np.ones((1, 1, 2, 2)), np.zeros(1))
        with pytest.raises(ValueError):
            layers.conv_backward(x, p, np.zeros((1, 1, 2, 2)), 1)


class TestMaxPool:
    def test_two_by_two(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out, idx = layers.maxpool_forward(x, 2, 2)
        assert out.item() == 4.0
        assert idx.rows.item() == 1 and idx.cols.item() == 1

    def test_ties_take_window_origin(self):
        x = np.ones((1, 1, 4, 4))
        out, idx = layers.maxpool_forward(x, 2, 2)
        assert (out == 1).all()
        np.testing.assert_array_equal(idx.rows[0, 0], [[0, 0], [2, 2]])
        np.testing.assert_array_equal(idx.cols[0, 0], [[0, 2], [0, 2]])

    def test_strictly_increasing_picks_bottom_right(self):
        x = np.arange(36.0).reshape(1, 1, 6, 6)
        _, idx = layers.maxpool_forward(x, 3, 3)
        np.testing.assert_array_equal(idx.rows[0, 0], [[2, 2], [5, 5]])
        np.testing.assert_array_equal(idx.cols[0, 0], [[2, 5], [2, 5]])

    def test_window_larger_than_input(self):
        with pytest.raises(ValueError):
            layers.maxpool_forward(np.zeros((1, 1, 2, 2)), 3, 1)

    def test_against_window_enumeration(self):
        for seed in range(5):
            x = rand(Rng(seed), (2, 3, 7, 8))
            for window, stride in ((2, 2), (3, 2), (3, 3)):
                out, idx = layers.maxpool_forward(x, window, stride)
                n, c, oh, ow = out.shape
                for bi in range(n):
                    for ci in range(c):
                        for i in range(oh):
                            for j in range(ow):
                                win = x[bi, ci, i * stride : i * stride + window,
                                        j * stride : j * stride + window]
                                assert out[bi, ci, i, j] == win.max()
                                r = idx.rows[bi, ci, i, j] - i * stride
                                co = idx.cols[bi, ci, i, j] - j * stride
                                assert win[r, co] == win.max()


class TestUnpool:
    def test_round_trip_distinct_values(self):
        x = Rng(3).permutation(36).astype(np.float64).reshape(1, 1, 6, 6)
        pooled, idx = layers.maxpool_forward(x, 3, 3)
        up = layers.unpool(pooled, idx, x.shape)
        mask = np.zeros_like(x, dtype=bool)
        mask[0, 0, idx.rows[0, 0], idx.cols[0, 0]] = True
        assert (up[mask] == x[mask]).all()
        assert (up[~mask] == 0).all()

    def test_zero_pooled_gives_zeros(self):
        x = rand(Rng(4), (1, 2, 6, 6))
        _, idx = layers.maxpool_forward(x, 3, 3)
        assert (layers.unpool(np.zeros((1, 2, 2, 2)), idx, x.shape) == 0).all()

    def test_value_conservation_non_overlapping(self):
        x = rand(Rng(5), (2, 2, 9, 9))
        pooled, idx = layers.maxpool_forward(x, 3, 3)
        up = layers.unpool(pooled, idx, x.shape)
        assert np.isclose(up.sum(), pooled.sum(), rtol=0, atol=0)

    def test_overlapping_windows_sum_contributions(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 7.0  # argmax of all four 2x2 stride-1 windows
        pooled, idx = layers.maxpool_forward(x, 2, 1)
        up = layers.unpool(pooled, idx, x.shape)
        assert up[0, 0, 1, 1] == 28.0 and up.sum() == 28.0

    def test_shape_mismatch_errors(self):
        x = rand(Rng(6), (1, 1, 6, 6))
        pooled, idx = layers.maxpool_forward(x, 3, 3)
        with pytest.raises(ValueError):
            layers.unpool(pooled, idx, (1, 1, 5, 5))

    def test_out_of_range_index_errors(self):
        x = rand(Rng(6), (1, 1, 6, 6))
        pooled, idx = layers.maxpool_forward(x, 3, 3)
        idx.rows[0, 0, 0, 0] = 99
        idx_bad = layers.PoolIndices(idx.rows, idx.cols, 3, 3, 6, 6)
        with pytest.raises(ValueError):
            layers.unpool(pooled, idx_bad, x.shape)

    def test_pool_unpool_pool_idempotent(self):
        x = rand(Rng(7), (2, 2, 9, 9))
        pooled, idx = layers.maxpool_forward(x, 3, 3)
        up = layers.unpool(pooled, idx, x.shape)
        pooled2, _ = layers.maxpool_forward(up, 3, 3)
        np.testing.assert_array_equal(pooled, pooled2)


class TestDeconv:
    def test_identity_1x1_kernel(self):
        x = rand(Rng(8), (2, 1, 4, 4))
        p = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(layers.deconv_forward(x, p, 1), x)

    def test_adjoint_of_conv(self):
        for seed in range(20):
            rng = Rng(seed)
            x = rand(rng, (2, 3, 6, 6))
            w = rand(rng, (2, 3, 3, 3))
            y = rand(rng, (2, 2, 4, 4))
            conv = layers.conv_forward(x, ConvParams(w, np.zeros(2)), 1)
            deconv = layers.deconv_forward(y, ConvParams(w, np.zeros(3)), 1)
            lhs = float((np.asarray(conv) * y).sum())
            rhs = float((x * deconv).sum())
            assert abs(lhs - rhs) < 1e-10

    def test_impulse_response_is_the_kernel(self):
        w = rand(Rng(9), (1, 1, 3, 3))
        x = np.zeros((1, 1, 4, 4))
        x[0, 0, 1, 2] = 1.0
        out = layers.deconv_forward(x, ConvParams(w, np.zeros(1)), 1)
        np.testing.assert_allclose(out[0, 0, 1:4, 2:5], w[0, 0], rtol=0, atol=0)
        total = out.copy()
        total[0, 0, 1:4, 2:5] = 0
        assert (total == 0).all()

    def test_output_dims(self):
        x = np.zeros((1, 4, 5, 5))
        p = ConvParams(np.zeros((4, 2, 3, 3)), np.zeros(2))
        assert layers.deconv_forward(x, p, 2).shape == (1, 2, 11, 11)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            layers.deconv_forward(np.zeros((1, 3, 4, 4)),
                                  ConvParams(np.zeros((2, 1, 3, 3)), np.zeros(1)), 1)


class TestReluDense:
    def test_relu_values(self):
        x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
        np.testing.assert_array_equal(layers.relu(x).ravel(), [0, 0, 2])

    def test_relu_backward_zero_at_kink(self):
        x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
        g = np.ones_like(x)
        np.testing.assert_array_equal(layers.relu_backward(x, g).ravel(), [0, 0, 1])

    def test_dense_identity(self):
        x = rand(Rng(10), (3, 4)).reshape(3, 4)
        p = DenseParams(np.eye(4), np.zeros(4))
        np.testing.assert_array_equal(layers.dense_forward(x, p), x)

    def test_dense_zero_input_gives_bias(self):
        p = DenseParams(rand(Rng(11), (2, 5)).reshape(2, 5), np.array([0.3, -0.4]))
        out = layers.dense_forward(np.zeros((1, 5)), p)
        np.testing.assert_array_equal(out, [[0.3, -0.4]])

    def test_dense_length_mismatch(self):
        with pytest.raises(ValueError):
            layers.dense_forward(np.zeros((1, 3)),
                                 DenseParams(np.zeros((2, 5)), np.zeros(2)))


class TestSoftmaxCe:
    def test_equal_logits(self):
        probs, loss, _ = layers.softmax_ce(np.zeros((1, 2)), np.array([0]))
        np.testing.assert_allclose(probs, [[0.5, 0.5]])
        assert abs(loss - np.log(2)) < 1e-12

    def test_extreme_logits_no_overflow(self):
        probs, loss, grad = layers.softmax_ce(np.array([[1000.0, 0.0]]), np.array([0]))
        assert np.isfinite(probs).all() and np.isfinite(loss)
        np.testing.assert_allclose(probs, [[1.0, 0.0]], atol=1e-300)

    def test_probs_sum_to_one(self):
        logits = rand(Rng(12), (64, 2)).reshape(32, 4)[:, :2] * 10
        probs, _, _ = layers.softmax_ce(logits, np.zeros(32, dtype=int))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert (probs > 0).all() and (probs < 1).all()

    def test_loss_nonnegative(self):
        logits = rand(Rng(13), (16, 2)).reshape(8, 4)[:, :2]
        _, loss, _ = layers.softmax_ce(logits, np.ones(8, dtype=int))
        assert loss >= 0

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            layers.softmax_ce(np.zeros((1, 2)), np.array([2]))
