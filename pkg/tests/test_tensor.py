import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bamguard import _kernels
from bamguard import tensor as T
from bamguard.gradcheck import check_gradients


def naive_conv2d(x, k, b, stride, padding, dilation):
    """Straight-line reference: loop over every output position."""
    n, c, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for b_ in range(n):
        for o in range(co):
            for y in range(oh):
                for x_ in range(ow):
                    acc = b[o]
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[b_, ci, y * stride + i * dilation, x_ * stride + j * dilation] * k[o, ci, i, j]
                    out[b_, o, y, x_] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self):
        out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 3, 3)))

    def test_hand_convolution(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = T.conv2d(x, np.ones((1, 1, 2, 2)), np.zeros(1))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 10.0

    def test_no_placement_is_dimension_error(self):
        with pytest.raises(T.DimensionError, match="no kernel placement"):
            T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), np.zeros(1))
        with pytest.raises(T.DimensionError):
            T.conv2d(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)), dilation=3)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(T.DimensionError, match="axis 1"):
            T.conv2d(np.ones((1, 2, 5, 5)), np.ones((1, 3, 3, 3)))

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 0, 2), (3, 1, 1)])
    def test_matches_naive_loops(self, f64, rng, stride, padding, dilation):
        x = rng.standard_normal((2, 3, 9, 8))
        k = rng.standard_normal((4, 3, 3, 2))
        b = rng.standard_normal(4)
        out = T.conv2d(x, k, b, stride, padding, dilation)
        ref = naive_conv2d(x, k, b, stride, padding, dilation)
        assert out.shape == ref.shape
        oh = (9 + 2 * padding - dilation * 2 - 1) // stride + 1
        assert out.shape[2] == oh
        np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2)])
    def test_gradients(self, f64, rng, stride, padding, dilation):
        x = T.Tensor(rng.uniform(-1, 1, (2, 2, 7, 7)), requires_grad=True)
        k = T.Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
        b = T.Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
        w = rng.uniform(-1, 1, T.conv2d(x, k, b, stride, padding, dilation).shape)
        err = check_gradients(lambda: T.sum_(T.mul(T.conv2d(x, k, b, stride, padding, dilation), w)), [x, k, b])
        assert err <= 1e-4


class TestKernelBackends:
    @pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2), (3, 2)])
    def test_numba_and_numpy_paths_bit_identical(self, rng, stride, dilation):
        xp = rng.standard_normal((2, 3, 11, 10))
        oh = (11 - dilation * 2 - 1) // stride + 1
        ow = (10 - dilation * 2 - 1) // stride + 1
        a = _kernels.im2col(xp, 3, 3, stride, dilation, oh, ow, use_numba=True)
        b = _kernels.im2col(xp, 3, 3, stride, dilation, oh, ow, use_numba=False)
        assert np.array_equal(a, b)
        g = rng.standard_normal(a.shape)
        fa = _kernels.col2im(g, xp.shape, stride, dilation, use_numba=True)
        fb = _kernels.col2im(g, xp.shape, stride, dilation, use_numba=False)
        assert np.array_equal(fa, fb)

    def test_col2im_is_adjoint_of_im2col(self, rng):
        xp = rng.standard_normal((1, 2, 8, 8))
        cols = _kernels.im2col(xp, 3, 3, 2, 1, 3, 3)
        g = rng.standard_normal(cols.shape)
        lhs = np.sum(cols * g)
        rhs = np.sum(xp * _kernels.col2im(g, xp.shape, 2, 1))
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestDense:
    def test_identity(self):
        x = np.array([[1.0, -2.0, 3.0]])
        np.testing.assert_array_equal(T.dense(x, np.eye(3), np.zeros(3)).data, x)

    def test_hand_dot(self):
        assert T.dense([[1.0, 2.0]], [[3.0, 4.0]], [5.0]).data.tolist() == [[16.0]]

    def test_din_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.dense(np.ones((1, 3)), np.ones((2, 4)), np.zeros(2))

    def test_gradients(self, f64, rng):
        x = T.Tensor(rng.uniform(-1, 1, (4, 5)), requires_grad=True)
        w = T.Tensor(rng.uniform(-1, 1, (3, 5)), requires_grad=True)
        b = T.Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
        c = rng.uniform(-1, 1, (4, 3))
        assert check_gradients(lambda: T.sum_(T.mul(T.dense(x, w, b), c)), [x, w, b]) <= 1e-4


class TestElementwise:
    def test_sigmoid_zero(self):
        assert T.sigmoid(np.array(0.0)).data == 0.5

    def test_sigmoid_extremes_finite(self):
        s = T.sigmoid(np.array([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(s))

    def test_mul_identity_mask(self):
        np.testing.assert_array_equal(T.mul([1.0, 2.0, 3.0], [1.0, 1.0, 1.0]).data, [1, 2, 3])

    def test_relu(self):
        np.testing.assert_array_equal(T.relu([-1.0, 0.0, 2.0]).data, [0, 0, 2])

    def test_broadcast_singleton(self, f64, rng):
        a = rng.standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(T.mul(a, np.ones((2, 3, 1, 1))).data, a)
        np.testing.assert_array_equal(T.mul(a, np.zeros((1, 1, 4, 4))).data, np.zeros_like(a))

    def test_non_broadcastable(self):
        with pytest.raises(T.DimensionError):
            T.add(np.ones((2, 3)), np.ones((3, 2)))

    def test_clamp_gradient_saturates(self, f64):
        x = T.Tensor([-2.0, 0.5, 3.0], requires_grad=True)
        T.backward(T.sum_(T.clamp(x, 0.0, 1.0)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    @pytest.mark.parametrize("op", ["relu", "sigmoid", "exp", "add", "sub", "mul", "minimum", "scale", "clamp"])
    def test_gradients(self, f64, rng, op):
        a = T.Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        b = T.Tensor(rng.uniform(-1, 1, (1, 4)), requires_grad=True)
        w = rng.uniform(-1, 1, (3, 4))
        fn = {
            "relu": lambda: T.relu(a), "sigmoid": lambda: T.sigmoid(a), "exp": lambda: T.exp(a),
            "add": lambda: T.add(a, b), "sub": lambda: T.sub(a, b), "mul": lambda: T.mul(a, b),
            "minimum": lambda: T.minimum(a, b), "scale": lambda: T.scale(a, -2.5),
            "clamp": lambda: T.clamp(a, -0.5, 0.5),
        }[op]
        assert check_gradients(lambda: T.sum_(T.mul(fn(), w)), [a, b]) <= 1e-4

    def test_log_gradient(self, f64, rng):
        a = T.Tensor(rng.uniform(0.5, 2, (5,)), requires_grad=True)
        assert check_gradients(lambda: T.sum_(T.log(a)), [a]) <= 1e-4


class TestReductions:
    def test_uniform_softmax(self):
        np.testing.assert_allclose(T.softmax(np.zeros(4)).data, 0.25)

    def test_global_avg_pool(self):
        assert T.global_avg_pool(np.array([[[[1.0, 3.0], [5.0, 7.0]]]])).data.item() == 4.0

    def test_softmax_normalized(self, rng):
        p = T.softmax(rng.standard_normal((50, 6)) * 10, axis=1).data
        assert p.min() > 0
        assert np.abs(p.sum(axis=1) - 1).max() <= 1e-6

    def test_invalid_axis(self):
        with pytest.raises(T.DimensionError):
            T.softmax(np.zeros((2, 3)), axis=2)
        with pytest.raises(T.DimensionError):
            T.sum_(np.zeros((2, 3)), axis=-3)

    def test_log_softmax_consistent(self, rng):
        x = rng.standard_normal((4, 5))
        np.testing.assert_allclose(np.exp(T.log_softmax(x).data), T.softmax(x).data, rtol=1e-6)

    @pytest.mark.parametrize("op", ["softmax", "log_softmax", "sum", "mean", "gap"])
    def test_gradients(self, f64, rng, op):
        a = T.Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)), requires_grad=True)
        fn = {
            "softmax": lambda: T.softmax(a, axis=1), "log_softmax": lambda: T.log_softmax(a, axis=-1),
            "sum": lambda: T.sum_(a, axis=(1, 3), keepdims=True), "mean": lambda: T.mean(a, axis=2),
            "gap": lambda: T.global_avg_pool(a),
        }[op]
        w = rng.uniform(-1, 1, fn().shape)
        assert check_gradients(lambda: T.sum_(T.mul(fn(), w)), [a]) <= 1e-4


class TestBackward:
    def test_sum_grad_is_ones(self, rng):
        x = T.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        T.backward(T.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square(self, f64):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.sum_(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_sigmoid_slope_at_zero(self, f64):
        z = T.Tensor(0.0, requires_grad=True)
        T.backward(T.scale(T.sigmoid(z), 3.0))
        assert z.grad == pytest.approx(0.75)

    def test_non_scalar_loss(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(T.DimensionError):
            T.backward(T.mul(x, x))

    def test_detached_graph_warns_and_zeroes(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            loss = T.sum_(T.mul(x, x))
        with pytest.warns(RuntimeWarning):
            assert T.backward(loss, inputs=(x,)) is False
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_shared_node_visited_once(self, f64):
        x = T.Tensor([3.0], requires_grad=True)
        y = T.mul(x, x)
        z = T.add(y, y)
        order = T.topological_order(z)
        assert len(order) == len({id(n) for n in order}) == 3
        assert order.index(x) < order.index(y) < order.index(z)
        T.backward(T.sum_(z))
        assert x.grad.tolist() == [12.0]

    def test_gradients_accumulate(self, f64):
        x = T.Tensor([1.0], requires_grad=True)
        T.backward(T.sum_(x))
        T.backward(T.sum_(T.scale(x, 2.0)))
        assert x.grad.tolist() == [3.0]

    def test_no_grad_records_nothing(self):
        x = T.Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad and y.is_leaf


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_forward_is_deterministic(x):
    a = T.conv2d(x[None, None], np.ones((2, 1, 2, 2)), np.zeros(2)).data
    b = T.conv2d(x[None, None], np.ones((2, 1, 2, 2)), np.zeros(2)).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (2, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    p = T.softmax(x, axis=1).data
    assert p.min() > 0
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-6
