"""Forward semantics of the tensor core ops."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lfsynth import ops
from lfsynth.tensor import GraphError, ShapeError, Tape, Tensor, backward


def t64(data, grad=False):
    return Tensor(np.asarray(data), requires_grad=grad, dtype=np.float64)


class TestConv2d:
    def test_identity_kernel(self):
        x = t64(np.ones((1, 1, 3, 3)))
        k = t64(np.ones((1, 1, 1, 1)))
        b = t64(np.zeros(1))
        out = ops.conv2d(x, k, b, 1)
        assert np.array_equal(out.data, x.data)

    def test_zero_kernel_annihilates(self, rng):
        x = t64(rng.standard_normal((2, 3, 4, 5)))
        k = t64(np.zeros((2, 3, 3, 3)))
        b = t64(np.zeros(2))
        assert not ops.conv2d(x, k, b, 1).data.any()

    def test_all_ones_hand_convolution(self):
        x = t64(np.ones((1, 1, 3, 3)))
        k = t64(np.ones((1, 1, 3, 3)))
        b = t64(np.zeros(1))
        out = ops.conv2d(x, k, b, 1).data[0, 0]
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], np.float64)
        assert np.array_equal(out, expected)

    def test_channel_mismatch_raises(self, rng):
        x = t64(rng.standard_normal((1, 2, 4, 4)))
        k = t64(rng.standard_normal((1, 3, 3, 3)))
        with pytest.raises(ShapeError):
            ops.conv2d(x, k, None, 1)

    def test_dilation_matches_direct_computation(self, rng):
        x = rng.standard_normal((1, 1, 7, 7))
        k = rng.standard_normal((1, 1, 3, 3))
        out = ops.conv2d(t64(x), t64(k), None, 2).data[0, 0]
        xp = np.pad(x[0, 0], 2)
        direct = np.zeros((7, 7))
        for i in range(3):
            for j in range(3):
                direct += k[0, 0, i, j] * xp[2 * i : 2 * i + 7, 2 * j : 2 * j + 7]
        assert np.allclose(out, direct, atol=1e-12)

    def test_linearity(self, rng):
        x = t64(rng.standard_normal((1, 2, 4, 4)))
        y = t64(rng.standard_normal((1, 2, 4, 4)))
        k = t64(rng.standard_normal((3, 2, 3, 3)))
        a, b = 1.7, -0.3
        lhs = ops.conv2d(t64(a * x.data + b * y.data), k, None, 1).data
        rhs = a * ops.conv2d(x, k, None, 1).data + b * ops.conv2d(y, k, None, 1).data
        assert np.abs(lhs - rhs).max() < 1e-10

    def test_spatial_dims_preserved(self, rng):
        for dil in (1, 2, 4):
            x = t64(rng.standard_normal((1, 1, 9, 6)))
            k = t64(rng.standard_normal((1, 1, 3, 3)))
            assert ops.conv2d(x, k, None, dil).shape == (1, 1, 9, 6)


class TestAvgPool:
    @given(c=st.floats(-5, 5), k=st.integers(1, 4))
    @settings(max_examples=25, deadline=None)
    def test_constant_input(self, c, k):
        x = t64(np.full((1, 1, 4, 4), c))
        assert np.allclose(ops.avg_pool(x, k).data, c, atol=1e-12)

    def test_k1_is_identity(self, rng):
        x = t64(rng.standard_normal((2, 3, 5, 4)))
        assert np.array_equal(ops.avg_pool(x, 1).data, x.data)

    def test_two_by_two_mean(self):
        x = t64(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2))
        assert np.array_equal(ops.avg_pool(x, 2).data, np.full((1, 1, 2, 2), 4.0))

    def test_upsampled_to_input_shape(self, rng):
        x = t64(rng.standard_normal((1, 2, 19, 13)))
        assert ops.avg_pool(x, 8).shape == (1, 2, 19, 13)

    def test_degenerate_kernel_raises(self):
        x = t64(np.ones((1, 1, 4, 4)))
        with pytest.raises(ops.PoolError):
            ops.avg_pool(x, 5)
        # oversize in only one extent still pools
        wide = t64(np.ones((1, 1, 4, 16)))
        ops.avg_pool(wide, 8)


class TestElu:
    def test_zero(self):
        assert ops.elu(t64(0.0)).item() == 0.0

    def test_positive_identity(self):
        assert ops.elu(t64(2.0)).item() == 2.0

    def test_negative_branch(self):
        out = ops.elu(t64(-1.0)).item()
        assert out == pytest.approx(math.exp(-1) - 1, abs=1e-12)

    @given(arrays(np.float64, (3, 3), elements=st.floats(-4, 4)))
    @settings(max_examples=25, deadline=None)
    def test_range_and_monotone(self, data):
        out = ops.elu(t64(data)).data
        assert (out > -1).all()
        order = np.argsort(data.ravel())
        assert (np.diff(out.ravel()[order]) >= -1e-12).all()


class TestBatchNorm:
    def test_train_mode_normalizes(self, rng):
        x = t64(rng.normal(3.0, 2.5, (4, 3, 5, 5)))
        gamma, beta = t64(np.ones(3)), t64(np.zeros(3))
        state = ops.BatchNormState.fresh(3, np.float64)
        out = ops.batch_norm(x, gamma, beta, state, training=True).data
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-6
        assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-3

    def test_zero_gamma_gives_shift(self, rng):
        x = t64(rng.standard_normal((2, 3, 4, 4)))
        gamma = t64(np.zeros(3))
        beta = t64(np.array([1.0, -2.0, 0.5]))
        state = ops.BatchNormState.fresh(3, np.float64)
        out = ops.batch_norm(x, gamma, beta, state, training=True).data
        assert np.allclose(out, beta.data[None, :, None, None])

    def test_eval_identity_stats(self, rng):
        x = t64(rng.standard_normal((2, 3, 4, 4)))
        gamma, beta = t64(np.ones(3)), t64(np.zeros(3))
        state = ops.BatchNormState.fresh(3, np.float64)
        out = ops.batch_norm(x, gamma, beta, state, training=False).data
        assert np.abs(out - x.data).max() < 1e-4  # epsilon-only deviation

    def test_running_stats_update(self, rng):
        x = t64(rng.normal(2.0, 1.0, (2, 1, 8, 8)))
        state = ops.BatchNormState.fresh(1, np.float64)
        ops.batch_norm(x, t64(np.ones(1)), t64(np.zeros(1)), state, training=True)
        assert state.mean[0] != 0.0 and state.var[0] != 1.0
        frozen = state.copy()
        ops.batch_norm(x, t64(np.ones(1)), t64(np.zeros(1)), state, training=True,
                       update_stats=False)
        assert np.array_equal(state.mean, frozen.mean)

    def test_tiny_batch_raises(self):
        x = t64(np.ones((1, 2, 1, 1)))
        state = ops.BatchNormState.fresh(2, np.float64)
        with pytest.raises(ShapeError):
            ops.batch_norm(x, t64(np.ones(2)), t64(np.zeros(2)), state, training=True)


class TestSoftmaxBeta:
    @given(
        arrays(np.float64, (4,), elements=st.floats(-3, 3)),
        st.floats(0.1, 10.0),
    )
    @settings(max_examples=40, deadline=None)
    def test_simplex(self, logits, beta):
        x = t64(logits.reshape(1, 4, 1, 1))
        out = ops.softmax_beta(x, t64(beta)).data
        assert (out >= 0).all()
        assert abs(out.sum() - 1) < 1e-6

    def test_equal_logits_uniform(self):
        x = t64(np.full((2, 4, 3, 3), 0.7))
        out = ops.softmax_beta(x, t64(5.0)).data
        assert np.allclose(out, 0.25, atol=1e-12)

    def test_learned_temperature_value(self):
        x = t64(np.array([1.0, 0, 0, 0]).reshape(1, 4, 1, 1))
        out = ops.softmax_beta(x, t64(8.01)).data[0, :, 0, 0]
        expect = math.exp(8.01) / (math.exp(8.01) + 3)
        assert out[0] == pytest.approx(expect, rel=1e-12)

    def test_log2_logit(self):
        x = t64(np.array([math.log(2), 0, 0, 0]).reshape(1, 4, 1, 1))
        out = ops.softmax_beta(x, t64(1.0)).data[0, :, 0, 0]
        assert np.allclose(out, [0.4, 0.2, 0.2, 0.2], atol=1e-12)

    def test_huge_logits_stable(self):
        x = t64(np.array([1e4, -1e4, 0, 0]).reshape(1, 4, 1, 1))
        out = ops.softmax_beta(x, t64(10.0)).data
        assert np.isfinite(out).all() and abs(out.sum() - 1) < 1e-6


class TestBilinearSample:
    def test_exact_at_grid_nodes(self, rng):
        img = t64(rng.standard_normal((1, 3, 4, 5)))
        gx = np.broadcast_to(np.arange(4.0)[:, None], (4, 5))
        gy = np.broadcast_to(np.arange(5.0)[None, :], (4, 5))
        out = ops.bilinear_sample(img, t64(gx[None, None]), t64(gy[None, None]))
        assert np.array_equal(out.data, img.data)

    def test_linear_ramp_exact(self):
        ramp = np.broadcast_to(np.arange(6.0)[None, :], (5, 6)).copy()
        img = t64(ramp[None, None])
        gx = np.broadcast_to(np.arange(5.0)[:, None], (5, 6))
        gy = np.broadcast_to(np.arange(6.0)[None, :], (5, 6)) + 0.5
        out = ops.bilinear_sample(img, t64(gx[None, None]), t64(gy[None, None])).data
        assert np.allclose(out[0, 0, :, :-1], ramp[:, :-1] + 0.5, atol=1e-12)

    def test_border_clamp(self, rng):
        img = t64(rng.standard_normal((1, 1, 3, 4)))
        gx = np.broadcast_to(np.arange(3.0)[:, None], (3, 4))
        gy = np.full((3, 4), -3.7)
        out = ops.bilinear_sample(img, t64(gx[None, None]), t64(gy[None, None])).data
        assert np.allclose(out[0, 0], img.data[0, 0, :, :1], atol=1e-12)


class TestBackward:
    def test_weighted_sum_grad_is_weight(self, rng):
        w = t64(rng.standard_normal((3, 4)), grad=True)
        x = t64(rng.standard_normal((3, 4)))
        with Tape() as tape:
            loss = ops.sum_(ops.mul(w, x))
        backward(loss, tape)
        assert np.allclose(w.grad, x.data, atol=1e-12)

    def test_mse_grad(self, rng):
        x = t64(rng.standard_normal(6), grad=True)
        target = t64(rng.standard_normal(6))
        with Tape() as tape:
            d = ops.sub(x, target)
            loss = ops.mean(ops.mul(d, d))
        backward(loss, tape)
        assert np.allclose(x.grad, 2 * (x.data - target.data) / 6, atol=1e-12)

    def test_non_scalar_loss_rejected(self, rng):
        x = t64(rng.standard_normal(3), grad=True)
        with Tape() as tape:
            y = ops.mul(x, x)
        with pytest.raises(GraphError):
            backward(y, tape)

    def test_loss_outside_tape_rejected(self, rng):
        x = t64(rng.standard_normal(3), grad=True)
        with Tape():
            pass
        with Tape() as other:
            loss = ops.sum_(x)
        fresh = Tape()
        with pytest.raises(GraphError):
            backward(loss, fresh)
        backward(loss, other)  # the recording tape accepts it

    def test_grads_accumulate_across_backward_calls(self, rng):
        x = t64(rng.standard_normal(4), grad=True)
        for expected_scale in (1, 2):
            with Tape() as tape:
                loss = ops.sum_(ops.mul(x, x))
            backward(loss, tape)
            assert np.allclose(x.grad, expected_scale * 2 * x.data, atol=1e-12)

    def test_tape_cleared_after_backward(self, rng):
        x = t64(rng.standard_normal(4), grad=True)
        with Tape() as tape:
            loss = ops.sum_(x)
        backward(loss, tape)
        assert len(tape) == 0


class TestDeterminism:
    def test_forward_bit_identical(self):
        rng1 = np.random.default_rng(7)
        rng2 = np.random.default_rng(7)
        for precision in (np.float32, np.float64):
            a1 = Tensor(rng1.standard_normal((2, 3, 8, 8)), dtype=precision)
            k1 = Tensor(rng1.standard_normal((4, 3, 3, 3)), dtype=precision)
            a2 = Tensor(rng2.standard_normal((2, 3, 8, 8)), dtype=precision)
            k2 = Tensor(rng2.standard_normal((4, 3, 3, 3)), dtype=precision)
            o1 = ops.conv2d(a1, k1, None, 2)
            o2 = ops.conv2d(a2, k2, None, 2)
            assert np.array_equal(o1.data, o2.data)

    def test_dtype_mismatch_rejected(self, rng):
        a = Tensor(rng.standard_normal(3), dtype=np.float32)
        b = Tensor(rng.standard_normal(3), dtype=np.float64)
        with pytest.raises(ShapeError):
            ops.add(a, b)
