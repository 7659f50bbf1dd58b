import os
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from keyprop import tensor as T
from keyprop.gradcheck import check_gradients, finite_diff_grad, rel_error
from keyprop.tensor import DimensionError, GraphError, NonFiniteError, Tensor
from oracles import conv2d_loops


class TestGraph:
    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
        y = T.mul(x, x)
        T.sum(T.add(y, y)).backward()
        np.testing.assert_allclose(x.grad, 4 * x.data)

    def test_graph_is_consumed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.sum(T.mul(x, x))
        y.backward()
        with pytest.raises(GraphError):
            y.backward()

    def test_retain_graph_allows_second_pass(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.sum(T.mul(x, x))
        y.backward(retain_graph=True)
        y.backward()
        np.testing.assert_allclose(x.grad, 4 * np.ones(3))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert y.node is None and not y.requires_grad

    def test_no_grad_is_thread_local(self):
        seen = {}

        def worker():
            seen["enabled"] = T.grad_enabled()

        with T.no_grad():
            th = threading.Thread(target=worker)
            th.start()
            th.join()
        assert seen["enabled"] is True

    def test_nonfinite_is_reported(self):
        x = Tensor(np.array([1.0, np.inf]))
        with pytest.raises(NonFiniteError):
            T.mul(x, 2.0)

    def test_nonfinite_check_can_be_disabled(self):
        previous = T.set_check_finite(False)
        try:
            y = T.mul(Tensor(np.array([np.inf])), 2.0)
            assert np.isinf(y.data[0])
        finally:
            T.set_check_finite(previous)

    def test_backward_needs_scalar_or_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.mul(x, 3.0)
        with pytest.raises(GraphError):
            y.backward()
        y.backward(np.ones(3))
        np.testing.assert_allclose(x.grad, 3.0)


class TestBroadcastPolicy:
    def test_mismatched_shapes_refused(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_scalar_allowed(self):
        np.testing.assert_allclose(T.add(Tensor(np.ones(3)), 2.0).data, 3.0)

    def test_broadcast_to_gradient_sums(self):
        b = Tensor(np.arange(3.0), requires_grad=True)
        T.sum(T.broadcast_to(b, (4, 3))).backward()
        np.testing.assert_allclose(b.grad, 4.0)


class TestNumerics:
    def test_softmax_is_shift_stable(self):
        y = T.softmax(Tensor(np.array([1000.0, 1000.0, 0.0])))
        np.testing.assert_allclose(y.data, [0.5, 0.5, 0.0], atol=1e-12)

    def test_layer_norm_zero_mean_unit_var(self, rng):
        x = Tensor(rng.standard_normal((5, 16)) * 7 + 3)
        y = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(-1), 1, rtol=1e-4)

    def test_sigmoid_matches_logistic(self, rng):
        x = rng.standard_normal(50) * 5
        np.testing.assert_allclose(T.sigmoid(Tensor(x)).data, 1 / (1 + np.exp(-x)), rtol=1e-10, atol=1e-15)

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30)))
    def test_softmax_sums_to_one(self, x):
        y = T.softmax(Tensor(x)).data
        assert np.all(y >= 0)
        assert abs(y.sum() - 1) < 1e-12

    def test_matmul_batch_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 4, 5))))


class TestConvolution:
    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
    def test_conv2d_matches_loops(self, rng, stride, pad):
        x = rng.standard_normal((2, 7, 6, 3))
        k = rng.standard_normal((3, 3, 3, 4))
        got = T.conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad).data
        np.testing.assert_allclose(got, conv2d_loops(x, k, stride, pad), atol=1e-10)

    def test_conv2d_3x3_pad1_preserves_extents(self, rng):
        y = T.conv2d(Tensor(rng.standard_normal((8, 8, 2))), Tensor(rng.standard_normal((3, 3, 2, 5))), pad=1)
        assert y.shape == (8, 8, 5)

    def test_conv2d_identity_kernel(self, rng):
        x = rng.standard_normal((5, 5, 3))
        k = np.zeros((3, 3, 3, 3))
        k[1, 1] = np.eye(3)
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k), pad=1).data, x)

    def test_conv2d_kernel_too_large(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((2, 2, 1))), Tensor(np.ones((5, 5, 1, 1))))

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((4, 4, 2))), Tensor(np.ones((3, 3, 3, 1))))

    @pytest.mark.parametrize("stride,pad,k", [(2, 1, 4), (1, 1, 3), (2, 0, 3), (3, 1, 5)])
    def test_transpose_is_adjoint(self, rng, stride, pad, k):
        # <conv(x), y> = <x, conv_t(y)>
        x = rng.standard_normal((2, 9, 8, 3))
        w = rng.standard_normal((k, k, 3, 4))
        y_shape = T.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).shape
        y = rng.standard_normal(y_shape)
        lhs = (T.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data * y).sum()
        xt = T.conv_transpose2d(Tensor(y), Tensor(w), stride=stride, pad=pad, output_size=(9, 8)).data
        assert abs(lhs - (x * xt).sum()) < 1e-9 * max(1.0, abs(lhs))

    def test_transpose_doubles_extents(self, rng):
        y = T.conv_transpose2d(Tensor(rng.standard_normal((4, 4, 6))), Tensor(rng.standard_normal((4, 4, 3, 6))), stride=2, pad=1)
        assert y.shape == (8, 8, 3)


class TestGradcheckHelpers:
    def test_finite_difference_of_square(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]))
        g = finite_diff_grad(lambda t: T.sum(T.mul(t, t)), x)
        np.testing.assert_allclose(g.data, 2 * x.data, rtol=1e-8)

    def test_rel_error_detects_mismatch(self):
        assert rel_error(np.ones(3), np.ones(3)) == 0
        assert rel_error(np.ones(3), 2 * np.ones(3)) > 0.4

    def test_wrong_backward_is_caught(self):
        x = Tensor(np.array([0.3, 0.7]), requires_grad=True)

        def bad_square(a):
            return T.make_op("bad", a.data**2, (a,), lambda g: (g * a.data,))  # missing factor 2

        err = check_gradients(lambda: T.sum(bad_square(x)), [x])
        assert err > 0.1
