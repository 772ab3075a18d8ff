"""Gradient correctness against central finite differences, plus the
optimizer and straight-through contracts."""

import numpy as np
import pytest

from tinysense import autodiff as ad

from gradcheck_util import central_diff, check_grads


def _shapes(rng, n, ndim_choices, maxdim=5):
    out = []
    for _ in range(n):
        nd = int(rng.choice(ndim_choices))
        out.append(tuple(int(rng.integers(1, maxdim + 1)) for _ in range(nd)))
    return out


RNG = np.random.default_rng(20240811)


class TestElementwise:
    @pytest.mark.parametrize("shape", _shapes(RNG, 20, [1, 2, 3]))
    def test_add_mul_sub(self, shape):
        a = RNG.normal(size=shape)
        b = RNG.normal(size=shape)
        check_grads(lambda ts: ad.tsum(ad.mul(ad.add(ts[0], ts[1]), ad.sub(ts[0], ts[1]))),
                    [a, b])

    @pytest.mark.parametrize("shape", _shapes(RNG, 20, [2, 3]))
    def test_broadcast_trailing(self, shape):
        a = RNG.normal(size=shape)
        b = RNG.normal(size=shape[-1:])  # bias-style trailing expansion
        check_grads(lambda ts: ad.tsum(ad.square(ad.add(ts[0], ts[1]))), [a, b])

    @pytest.mark.parametrize("shape", _shapes(RNG, 20, [1, 2, 3]))
    def test_relu(self, shape):
        a = RNG.normal(size=shape)
        a[np.abs(a) < 1e-2] += 0.1  # keep clear of the kink
        check_grads(lambda ts: ad.tsum(ad.relu(ts[0])), [a])

    @pytest.mark.parametrize("shape", _shapes(RNG, 20, [1, 2, 3]))
    def test_sigmoid_log_square(self, shape):
        a = RNG.normal(size=shape)
        check_grads(lambda ts: ad.tsum(ad.log(ad.sigmoid(ts[0]))), [a])
        check_grads(lambda ts: ad.tsum(ad.square(ts[0])), [a])

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4,\)"):
            ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros(4)))


class TestMatmulSoftmax:
    @pytest.mark.parametrize("i", range(20))
    def test_matmul(self, i):
        rng = np.random.default_rng(100 + i)
        n, k, m = rng.integers(1, 6, size=3)
        a = rng.normal(size=(n, k))
        b = rng.normal(size=(k, m))
        check_grads(lambda ts: ad.tsum(ad.square(ad.matmul(ts[0], ts[1]))), [a, b])

    @pytest.mark.parametrize("i", range(20))
    def test_matmul_batched(self, i):
        rng = np.random.default_rng(200 + i)
        b, n, k, m = rng.integers(1, 5, size=4)
        x = rng.normal(size=(b, n, k))
        w = rng.normal(size=(k, m))
        check_grads(lambda ts: ad.tsum(ad.square(ad.matmul(ts[0], ts[1]))), [x, w])

    def test_matmul_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(ad.Tensor(a), ad.Tensor(np.eye(2)))
        assert np.array_equal(out.data, a)

    def test_matmul_inner_dim_error(self):
        with pytest.raises(ad.ShapeError):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))

    @pytest.mark.parametrize("i", range(20))
    def test_softmax(self, i):
        rng = np.random.default_rng(300 + i)
        shape = (int(rng.integers(1, 5)), int(rng.integers(2, 6)))
        a = rng.normal(size=shape)
        w = rng.normal(size=shape)
        check_grads(lambda ts: ad.tsum(ad.mul(ad.softmax(ts[0]), w)), [a])

    @pytest.mark.parametrize("i", range(20))
    def test_layer_norm(self, i):
        rng = np.random.default_rng(400 + i)
        shape = (int(rng.integers(1, 5)), int(rng.integers(2, 7)))
        a = rng.normal(size=shape)
        w = rng.normal(size=shape)
        check_grads(lambda ts: ad.tsum(ad.mul(ad.layer_norm(ts[0]), w)), [a])


class TestReductionsAndViews:
    @pytest.mark.parametrize("i", range(20))
    def test_sum_mean_axis(self, i):
        rng = np.random.default_rng(500 + i)
        shape = tuple(rng.integers(1, 5, size=3))
        axis = int(rng.integers(0, 3))
        a = rng.normal(size=shape)
        check_grads(lambda ts: ad.tsum(ad.square(ad.tsum(ts[0], axis=axis))), [a])
        check_grads(lambda ts: ad.tsum(ad.square(ad.tmean(ts[0], axis=axis))), [a])

    def test_sum_of_zeros_is_zero(self):
        assert ad.tsum(ad.Tensor(np.zeros((3, 3)))).item() == 0.0

    @pytest.mark.parametrize("i", range(20))
    def test_reshape_transpose(self, i):
        rng = np.random.default_rng(600 + i)
        a = rng.normal(size=(2, 3, 4))
        perm = tuple(rng.permutation(3))
        w = rng.normal(size=(4, 6))
        check_grads(lambda ts: ad.tsum(ad.square(
            ad.matmul(ad.reshape(ad.transpose(ts[0], (0, 1, 2)), (6, 4)), w))), [a])
        check_grads(lambda ts: ad.tsum(ad.square(ad.transpose(ts[0], perm))), [a])

    @pytest.mark.parametrize("i", range(20))
    def test_gather_rows(self, i):
        rng = np.random.default_rng(700 + i)
        table = rng.normal(size=(int(rng.integers(3, 9)), int(rng.integers(2, 5))))
        idx = rng.integers(0, table.shape[0], size=(int(rng.integers(1, 5)),
                                                    int(rng.integers(1, 5))))
        check_grads(lambda ts: ad.tsum(ad.square(ad.gather_rows(ts[0], idx))), [table])


class TestConv:
    def test_hand_computed_conv(self):
        x = np.ones((1, 4, 4, 1))
        w = np.ones((2, 2, 1, 1))
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), stride=2, padding=0)
        assert out.shape == (1, 2, 2, 1)
        assert np.array_equal(out.data, np.full((1, 2, 2, 1), 4.0))

    @pytest.mark.parametrize("i", range(20))
    def test_conv2d_grads(self, i):
        rng = np.random.default_rng(800 + i)
        stride = int(rng.choice([1, 2]))
        k = int(rng.integers(1, 5))
        pad = int(rng.integers(0, 2))
        ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h = int(rng.integers(k, k + 4))
        wd = int(rng.integers(k, k + 4))
        x = rng.normal(size=(2, h, wd, ci))
        w = rng.normal(size=(k, k, ci, co))
        check_grads(lambda ts: ad.tsum(ad.square(
            ad.conv2d(ts[0], ts[1], stride=stride, padding=pad))), [x, w])

    @pytest.mark.parametrize("i", range(20))
    def test_conv_transpose2d_grads(self, i):
        rng = np.random.default_rng(900 + i)
        stride = int(rng.choice([1, 2]))
        k = int(rng.integers(1, 5))
        pad = int(rng.integers(0, min(k, 2)))
        ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h = int(rng.integers(2, 5))
        wd = int(rng.integers(2, 5))
        if (h - 1) * stride + k - 2 * pad < 1 or (wd - 1) * stride + k - 2 * pad < 1:
            pad = 0
        x = rng.normal(size=(2, h, wd, ci))
        w = rng.normal(size=(k, k, co, ci))
        check_grads(lambda ts: ad.tsum(ad.square(
            ad.conv_transpose2d(ts[0], ts[1], stride=stride, padding=pad))), [x, w])

    def test_conv_mirrors_transpose_shapes(self):
        x = ad.Tensor(np.zeros((1, 8, 12, 3)))
        w = ad.Tensor(np.zeros((4, 4, 3, 5)))
        down = ad.conv2d(x, w, stride=2, padding=1)
        assert down.shape == (1, 4, 6, 5)
        wt = ad.Tensor(np.zeros((4, 4, 3, 5)))
        up = ad.conv_transpose2d(ad.Tensor(np.zeros((1, 4, 6, 5))), wt,
                                 stride=2, padding=1)
        assert up.shape == (1, 8, 12, 3)

    def test_kernel_too_large(self):
        with pytest.raises(ValueError, match="kernel"):
            ad.conv2d(ad.Tensor(np.zeros((1, 8, 8, 1))),
                      ad.Tensor(np.zeros((5, 5, 1, 1))))

    def test_bad_stride(self):
        with pytest.raises(ValueError, match="stride"):
            ad.conv2d(ad.Tensor(np.zeros((1, 8, 8, 1))),
                      ad.Tensor(np.zeros((3, 3, 1, 1))), stride=3)


class TestBackward:
    def test_grad_of_sum_is_ones(self):
        p = ad.parameter(np.random.default_rng(0).normal(size=(3, 4)))
        ad.backward(ad.tsum(p))
        assert np.array_equal(p.grad, np.ones((3, 4)))

    def test_grad_of_sum_of_squares(self):
        p = ad.parameter(np.array([1.0, 2.0]))
        ad.backward(ad.tsum(ad.square(p)))
        assert np.array_equal(p.grad, np.array([2.0, 4.0]))

    def test_non_scalar_loss_rejected(self):
        p = ad.parameter(np.ones(3))
        with pytest.raises(ad.NonScalarLossError):
            ad.backward(ad.square(p))

    def test_two_layer_net_matches_fd(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(4, 5))
        w1 = rng.normal(size=(5, 6)) * 0.5
        b1 = rng.normal(size=(6,)) * 0.1
        w2 = rng.normal(size=(6, 2)) * 0.5
        y = rng.normal(size=(4, 2))

        def net(ts):
            h = ad.relu(ad.add(ad.matmul(ad.Tensor(x), ts[0]), ts[1]))
            out = ad.matmul(h, ts[2])
            return ad.tsum(ad.square(ad.sub(out, y)))

        check_grads(net, [w1, b1, w2], rtol=1e-4, h=1e-5)

    def test_shared_subexpression_accumulates(self):
        # 5-node DAG: loss = sum(a*b) + sum(a*a); d/da = b + 2a by per-path sum
        rng = np.random.default_rng(7)
        a_val = rng.normal(size=(3,))
        b_val = rng.normal(size=(3,))
        a = ad.parameter(a_val, "a")
        b = ad.parameter(b_val, "b")
        prod = ad.mul(a, b)
        sq = ad.mul(a, a)
        loss = ad.add(ad.tsum(prod), ad.tsum(sq))
        ad.backward(loss)
        assert np.allclose(a.grad, b_val + 2 * a_val, atol=1e-12)
        assert np.allclose(b.grad, a_val, atol=1e-12)

    def test_repeated_backward_is_stateless(self):
        p = ad.parameter(np.array([3.0]))
        loss = ad.tsum(ad.square(p))
        ad.backward(loss)
        first = p.grad.copy()
        ad.backward(loss)
        assert np.array_equal(p.grad, first)


class TestStraightThrough:
    def test_forward_is_second_argument_bitwise(self):
        z = ad.Tensor(np.array([1.0]))
        zq = ad.Tensor(np.array([5.0]))
        assert np.array_equal(ad.straight_through(z, zq).data, np.array([5.0]))

    def test_backward_is_identity_on_first(self):
        rng = np.random.default_rng(0)
        z = ad.parameter(rng.normal(size=(2, 3)))
        zq = ad.parameter(rng.normal(size=(2, 3)))
        ad.backward(ad.tsum(ad.straight_through(z, zq)))
        assert np.array_equal(z.grad, np.ones((2, 3)))
        assert zq.grad is None  # nothing reaches z_q through this path

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.straight_through(ad.Tensor(np.zeros(2)), ad.Tensor(np.zeros(3)))

    def test_quantized_pipeline_gradient_matches_identity_fd(self):
        # decoder(ST(z, quantize(z))): grad at z should equal the finite
        # difference of decoder(z itself), i.e. quantization acting as identity
        rng = np.random.default_rng(3)
        w = rng.normal(size=(4, 4)) * 0.5
        codebook = rng.normal(size=(16, 4))
        z0 = rng.normal(size=(5, 4))

        def decode_loss(z_data):
            out = z_data @ w
            return float((out * out).sum())

        z = ad.parameter(z0.copy(), "z")
        d2 = ((z0[:, None, :] - codebook) ** 2).sum(-1)
        zq = ad.Tensor(codebook[d2.argmin(1)])
        out = ad.matmul(ad.straight_through(z, zq), ad.Tensor(w))
        ad.backward(ad.tsum(ad.square(out)))

        num = central_diff(lambda arrs: decode_loss(arrs[0]), [z0.copy()], 0, h=1e-6)
        # FD of the identity-quantization path, evaluated at z_q per the
        # straight-through contract: grad flows as if z_q == z
        zq_num = central_diff(lambda arrs: decode_loss(arrs[0]),
                              [codebook[d2.argmin(1)].copy()], 0, h=1e-6)
        assert np.abs(z.grad - zq_num).max() <= 1e-6 * max(1, np.abs(zq_num).max())
        assert num.shape == z.grad.shape


class TestOptimizers:
    def test_sgd_single_step(self):
        p = ad.parameter(np.array([1.0]), "p")
        p.grad = np.array([1.0])
        ad.SGD([p], lr=0.1, momentum=0.0).step()
        assert np.allclose(p.data, [0.9])

    def test_zero_grad_no_motion(self):
        p = ad.parameter(np.array([1.0, -2.0]), "p")
        opt = ad.SGD([p], lr=0.1, momentum=0.9)
        p.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, np.array([1.0, -2.0]))

    def test_quadratic_contraction(self):
        p = ad.parameter(np.array([1.0]), "p")
        opt = ad.SGD([p], lr=0.1, momentum=0.0)
        for _ in range(100):
            loss = ad.tsum(ad.square(p))
            ad.zero_grads([p])
            ad.backward(loss)
            opt.step()
        assert abs(p.data[0]) < 1e-3

    def test_nonfinite_gradient_names_parameter(self):
        p = ad.parameter(np.array([1.0]), "enc.w")
        p.grad = np.array([np.nan])
        with pytest.raises(ad.NonFiniteGradientError, match="enc.w"):
            ad.SGD([p], lr=0.1).step()
        with pytest.raises(ad.NonFiniteGradientError, match="enc.w"):
            ad.Adam([p], lr=0.1).step()

    def test_bad_hyperparameters(self):
        p = ad.parameter(np.array([1.0]))
        with pytest.raises(ValueError):
            ad.SGD([p], lr=0.0)
        with pytest.raises(ValueError):
            ad.SGD([p], lr=0.1, momentum=1.0)

    def test_adam_converges_on_quadratic(self):
        p = ad.parameter(np.array([1.0]), "p")
        opt = ad.Adam([p], lr=0.05)
        for _ in range(200):
            ad.zero_grads([p])
            ad.backward(ad.tsum(ad.square(p)))
            opt.step()
        assert abs(p.data[0]) < 1e-3
