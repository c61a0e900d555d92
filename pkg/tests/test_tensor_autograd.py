import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from flowspike import ops
from flowspike.errors import ShapeError
from flowspike.tensor import Tensor, backward, is_grad_enabled, no_grad
from oracles import bilinear_up2_direct, central_fd, conv2d_direct, rel_err


def grad_of(fn, *arrays):
    """Autodiff gradients of scalar ``fn(*tensors)`` in float64."""
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    backward(fn(*ts))
    return [t.grad for t in ts]


def fd_of(fn, arrays, which, h=1e-3):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def f(x):
        args = list(arrays)
        args[which] = x
        return fn(*[Tensor(a) for a in args]).data

    return central_fd(f, arrays[which], h)


def assert_fd_close(fn, arrays, tol=1e-3, h=1e-3):
    grads = grad_of(fn, *arrays)
    for i, g in enumerate(grads):
        fd = fd_of(fn, arrays, i, h)
        assert rel_err(g, fd, floor=1e-6).max() < tol, f"argument {i}"


class TestTensor:
    def test_default_dtype_is_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_float64_is_kept(self):
        assert Tensor(np.zeros(2)).dtype == np.float64

    def test_rank_above_four_is_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_size_matches_data_length(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.size == 24 and t.shape == (2, 3, 4)

    def test_detach_drops_history(self):
        x = Tensor([1.0], requires_grad=True)
        y = ops.scale(x, 2.0).detach()
        assert y.is_leaf and not y.requires_grad


class TestBackward:
    def test_linear(self):
        (g,) = grad_of(lambda x: ops.sum(ops.scale(x, 2.0)), [3.0])
        assert g[0] == pytest.approx(2.0)

    def test_sum_of_squares(self, rng):
        x = rng.uniform(-1, 1, 5)
        (g,) = grad_of(lambda t: ops.sum(ops.mul(t, t)), x)
        np.testing.assert_allclose(g, 2 * x)

    def test_non_scalar_loss_is_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(ops.scale(x, 2.0))

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward(ops.sum(ops.mul(x, x)))
        backward(ops.sum(ops.mul(x, x)))
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_every_reachable_leaf_gets_a_grad(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        c = Tensor(np.ones(2))
        backward(ops.sum(ops.add(ops.mul(a, c), b)))
        assert a.grad is not None and b.grad is not None and c.grad is None

    def test_shared_subexpression(self):
        x = Tensor(np.array([0.3]), requires_grad=True)
        y = ops.tanh(x)
        backward(ops.sum(ops.add(y, y)))
        assert x.grad[0] == pytest.approx(2 * (1 - np.tanh(0.3) ** 2))

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = x
        for _ in range(5000):
            y = ops.scale(y, 1.0)
        backward(ops.sum(y))
        assert x.grad[0] == 1.0

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            assert not is_grad_enabled()
            y = ops.scale(x, 3.0)
        assert is_grad_enabled()
        assert not y.requires_grad

    def test_no_grad_is_thread_local(self):
        seen = []
        with no_grad():
            t = threading.Thread(target=lambda: seen.append(is_grad_enabled()))
            t.start()
            t.join()
        assert seen == [True]


class TestConv2d:
    def test_scalar_kernel(self):
        out = ops.conv2d(Tensor(np.ones((1, 3, 3))), Tensor([[[[2.0]]]]), Tensor([0.5]))
        np.testing.assert_allclose(out.data, np.full((1, 3, 3), 2.5))

    def test_delta_kernel_is_identity(self):
        x = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor([0.0]), padding=1)
        np.testing.assert_array_equal(out.data, x)

    def test_delta_selects_channel(self, rng):
        x = rng.normal(size=(3, 4, 5)).astype(np.float32)
        w = np.zeros((2, 3, 3, 3), dtype=np.float32)
        w[0, 2, 1, 1] = 1
        w[1, 0, 1, 1] = 1
        out = ops.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_array_equal(out.data[0], x[2])
        np.testing.assert_array_equal(out.data[1], x[0])

    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    def test_matches_direct_loops(self, rng, k):
        x = rng.normal(size=(3, 6, 7))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, conv2d_direct(x, w, b), rtol=1e-10, atol=1e-10)

    def test_fewer_pixels_than_channels(self, rng):
        # exercises the other GEMM orientation
        x = rng.normal(size=(8, 2, 2))
        w = rng.normal(size=(40, 8, 3, 3))
        np.testing.assert_allclose(ops.conv2d(Tensor(x), Tensor(w)).data, conv2d_direct(x, w), atol=1e-10)

    def test_gradient_matches_fd(self, rng):
        x = rng.uniform(-1, 1, (2, 5, 5))
        w = rng.uniform(-1, 1, (3, 2, 3, 3))
        b = rng.uniform(-1, 1, 3)
        assert_fd_close(lambda a, c, d: ops.sum(ops.conv2d(a, c, d)), [x, w, b])

    def test_gradient_with_weighted_loss(self, rng):
        x = rng.uniform(-1, 1, (2, 6, 4))
        w = rng.uniform(-1, 1, (3, 2, 5, 5))
        r = Tensor(rng.uniform(-1, 1, (3, 6, 4)))
        assert_fd_close(lambda a, c: ops.sum(ops.mul(ops.conv2d(a, c), r)), [x, w])

    def test_large_input_is_tiled_consistently(self, rng):
        x = rng.normal(size=(16, 64, 64)).astype(np.float32)
        w = rng.normal(size=(16, 16, 3, 3)).astype(np.float32)
        got = ops.conv2d(Tensor(x.astype(np.float64)), Tensor(w.astype(np.float64))).data
        ref = ops.conv2d(Tensor(x), Tensor(w)).data
        np.testing.assert_allclose(ref, got, rtol=1e-4, atol=1e-3)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ShapeError) as exc:
            ops.conv2d(Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((1, 3, 3, 3))))
        assert exc.value.dim == "channels"

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((1, 1, 2, 2))))


class TestPoolingAndResampling:
    def test_avg_pool_value(self):
        out = ops.avg_pool2(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
        assert out.shape == (1, 1, 1) and out.data[0, 0, 0] == 2.5

    def test_avg_pool_constant(self):
        np.testing.assert_allclose(ops.avg_pool2(Tensor(np.full((2, 4, 6), 1.7))).data, 1.7)

    def test_avg_pool_gradient_is_quarter(self, rng):
        (g,) = grad_of(lambda t: ops.sum(ops.avg_pool2(t)), rng.normal(size=(2, 4, 4)))
        np.testing.assert_allclose(g, 0.25)

    def test_avg_pool_odd_rejected(self):
        with pytest.raises(ShapeError):
            ops.avg_pool2(Tensor(np.zeros((1, 3, 4))))

    def test_bilinear_constant(self):
        np.testing.assert_allclose(ops.upsample_bilinear2(Tensor(np.full((2, 3, 5), -0.4))).data, -0.4,
                                   rtol=1e-6)

    def test_bilinear_single_pixel(self):
        np.testing.assert_allclose(ops.upsample_bilinear2(Tensor(np.array([[[3.0]]]))).data, 3.0)

    def test_bilinear_matches_pointwise_oracle(self, rng):
        x = rng.normal(size=(2, 3, 4))
        np.testing.assert_allclose(ops.upsample_bilinear2(Tensor(x)).data, bilinear_up2_direct(x), atol=1e-12)

    def test_bilinear_gradient(self, rng):
        r = Tensor(rng.uniform(-1, 1, (1, 6, 6)))
        assert_fd_close(lambda t: ops.sum(ops.mul(ops.upsample_bilinear2(t), r)), [rng.uniform(-1, 1, (1, 3, 3))])

    def test_nearest_replicates(self):
        out = ops.upsample_nearest(Tensor(np.array([[[5.0]]])), (2, 2))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 5.0))

    def test_nearest_gradient(self, rng):
        r = Tensor(rng.uniform(-1, 1, (2, 6, 9)))
        assert_fd_close(lambda t: ops.sum(ops.mul(ops.upsample_nearest(t, (6, 9)), r)),
                        [rng.uniform(-1, 1, (2, 2, 3))])

    def test_nearest_non_integer_scale_rejected(self):
        with pytest.raises(ShapeError):
            ops.upsample_nearest(Tensor(np.zeros((1, 2, 2))), (3, 4))

    def test_pool_then_nearest_preserves_block_means(self, rng):
        x = rng.normal(size=(3, 4, 6))
        y = ops.upsample_nearest(ops.avg_pool2(Tensor(x)), (4, 6)).data
        blocks = lambda a: a.reshape(3, 2, 2, 3, 2).mean(axis=(2, 4))  # noqa: E731
        np.testing.assert_allclose(blocks(y), blocks(x))

    def test_concat_order_and_shape(self):
        a = Tensor(np.zeros((1, 2, 2)))
        b = Tensor(np.ones((2, 2, 2)))
        out = ops.concat_channels(a, b)
        assert out.shape == (3, 2, 2)
        np.testing.assert_array_equal(out.data[0], 0)
        np.testing.assert_array_equal(out.data[1:], 1)

    def test_concat_gradient_routing(self, rng):
        r = Tensor(rng.uniform(-1, 1, (5, 3, 3)))
        assert_fd_close(lambda a, b: ops.sum(ops.mul(ops.concat_channels(a, b), r)),
                        [rng.uniform(-1, 1, (2, 3, 3)), rng.uniform(-1, 1, (3, 3, 3))])

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            ops.concat_channels(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 2, 3))))


class TestPointwise:
    def test_values(self):
        assert ops.tanh(Tensor([0.0])).data[0] == 0
        assert ops.sigmoid(Tensor([0.0])).data[0] == 0.5
        assert ops.leaky_relu(Tensor([-1.0])).data[0] == pytest.approx(-0.1)

    def test_sigmoid_is_stable(self):
        out = ops.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    @pytest.mark.parametrize("op", [ops.tanh, ops.sigmoid, ops.leaky_relu])
    def test_gradients(self, rng, op):
        x = rng.uniform(-1, 1, (3, 4))
        x[np.abs(x) < 0.01] = 0.5  # keep away from the leaky-relu kink
        assert_fd_close(lambda t: ops.sum(op(t)), [x])

    def test_broadcast_mul_gradient(self, rng):
        assert_fd_close(lambda a, b: ops.sum(ops.mul(a, b)),
                        [rng.uniform(-1, 1, (3, 1, 1)), rng.uniform(-1, 1, (3, 2, 4))])

    def test_composite_conv_pool_tanh(self, rng):
        w = rng.uniform(-1, 1, (2, 1, 3, 3))
        assert_fd_close(lambda x, k: ops.sum(ops.tanh(ops.avg_pool2(ops.conv2d(x, k)))),
                        [rng.uniform(-1, 1, (1, 4, 4)), w])


class TestSpikeStep:
    def test_forward_is_step(self):
        out = ops.spike_step(Tensor(np.array([0.3, -0.3, 0.0]))).data
        np.testing.assert_array_equal(out, [1, 0, 1])

    @pytest.mark.parametrize("x,expected", [(0.0, 1.0), (1.0, 1 / 11), (-0.5, 1 / 3.5)])
    def test_surrogate_values(self, x, expected):
        t = Tensor(np.array([x]), requires_grad=True)
        backward(ops.sum(ops.spike_step(t)))
        assert t.grad[0] == pytest.approx(expected)

    @given(hnp.arrays(np.float64, st.integers(1, 20), elements=st.floats(-5, 5)))
    def test_output_binary_and_backward_is_arctanspike(self, x):
        t = Tensor(x, requires_grad=True)
        y = ops.spike_step(t)
        assert set(np.unique(y.data)) <= {0.0, 1.0}
        backward(ops.sum(y))
        np.testing.assert_allclose(t.grad, 1.0 / (1.0 + 10.0 * x * x))
