import numpy as np
import pytest

from cloudseg.errors import ArgumentError, ShapeError
from cloudseg.layers import (
    BNParams,
    ConvParams,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    deconv2d_backward,
    deconv2d_forward,
    maxpool_backward,
    maxpool_forward,
    mse_loss,
    relu_backward,
    relu_forward,
)


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# slow nested-loop oracles, deliberately independent of the implementation
# ---------------------------------------------------------------------------

def naive_conv(x, weights, bias, stride=1, dilation=1, pad=0):
    n, c, h, w = x.shape
    k, _, r, _ = weights.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    span = dilation * (r - 1) + 1
    oh = (h + 2 * pad - span) // stride + 1
    ow = (w + 2 * pad - span) // stride + 1
    y = np.zeros((n, k, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ko in range(k):
            for u in range(oh):
                for v in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(r):
                            for j in range(r):
                                acc += (
                                    xp[ni, ci, u * stride + i * dilation,
                                       v * stride + j * dilation]
                                    * weights[ko, ci, i, j]
                                )
                    y[ni, ko, u, v] = acc + bias[ko]
    return y


def naive_pool(x):
    n, c, h, w = x.shape
    y = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for u in range(h // 2):
                for v in range(w // 2):
                    y[ni, ci, u, v] = max(
                        x[ni, ci, 2 * u, 2 * v], x[ni, ci, 2 * u, 2 * v + 1],
                        x[ni, ci, 2 * u + 1, 2 * v], x[ni, ci, 2 * u + 1, 2 * v + 1],
                    )
    return y


class TestConvForward:
    def test_all_ones_fixture(self):
        # 3x3 ones kernel over a 3x3 ones image, zero pad: center sees all 9,
        # corners see their 2x2 neighborhood
        x = np.ones((1, 1, 3, 3), dtype=np.float32)
        p = ConvParams(weights=np.ones((1, 1, 3, 3), np.float32),
                       bias=np.zeros(1, np.float32))
        y = conv2d_forward(x, p)
        assert y[0, 0, 1, 1] == 9
        for corner in ((0, 0), (0, 2), (2, 0), (2, 2)):
            assert y[0, 0][corner] == 4

    def test_same_padding_dilated(self):
        x = rng(1).normal(size=(1, 2, 8, 8))
        p = ConvParams(weights=rng(2).normal(size=(3, 2, 3, 3)),
                       bias=np.zeros(3), dilation=2)
        assert conv2d_forward(x, p).shape == (1, 3, 8, 8)

    @pytest.mark.parametrize("dilation", [1, 2])
    def test_against_naive_oracle(self, dilation):
        r = rng(7 + dilation)
        x = r.normal(size=(1, 2, 5, 5))
        w = r.normal(size=(3, 2, 3, 3))
        b = r.normal(size=3)
        p = ConvParams(weights=w, bias=b, dilation=dilation)
        got = conv2d_forward(x, p)
        want = naive_conv(x, w, b, dilation=dilation, pad=dilation)
        assert np.abs(got - want).max() < 1e-6

    def test_channel_mismatch(self):
        p = ConvParams(weights=np.zeros((2, 3, 3, 3)), bias=np.zeros(2))
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((1, 4, 8, 8)), p)

    def test_linearity_without_bias(self):
        r = rng(11)
        x = r.normal(size=(2, 3, 6, 6))
        p0 = ConvParams(weights=r.normal(size=(4, 3, 3, 3)), bias=np.zeros(4))
        y = conv2d_forward(x, p0)
        y2 = conv2d_forward(2.5 * x, p0)
        assert np.abs(y2 - 2.5 * y).max() < 1e-5 * np.abs(y2).max()


class TestConvBackward:
    def test_zero_grad_out(self):
        r = rng(3)
        x = r.normal(size=(1, 2, 4, 4))
        p = ConvParams(weights=r.normal(size=(2, 2, 3, 3)), bias=np.zeros(2))
        dx, dw, db = conv2d_backward(x, p, np.zeros((1, 2, 4, 4)))
        assert not dx.any() and not dw.any() and not db.any()

    def test_bias_grad_is_sum(self):
        r = rng(4)
        x = r.normal(size=(1, 1, 4, 4))
        p = ConvParams(weights=r.normal(size=(3, 1, 3, 3)), bias=np.zeros(3))
        _, _, db = conv2d_backward(x, p, np.ones((1, 3, 4, 4)))
        assert np.allclose(db, 16.0)

    def test_grad_shapes(self):
        r = rng(5)
        x = r.normal(size=(2, 3, 8, 8))
        p = ConvParams(weights=r.normal(size=(4, 3, 3, 3)), bias=np.zeros(4), dilation=2)
        dx, dw, db = conv2d_backward(x, p, r.normal(size=(2, 4, 8, 8)))
        assert dx.shape == x.shape
        assert dw.shape == p.weights.shape
        assert db.shape == p.bias.shape


class TestDeconv:
    def test_shape_doubling(self):
        r = rng(6)
        x = r.normal(size=(1, 1, 4, 4))
        p = ConvParams(weights=r.normal(size=(1, 3, 3, 3)), bias=np.zeros(3),
                       stride=2, transposed=True)
        assert deconv2d_forward(x, p).shape == (1, 3, 8, 8)

    @pytest.mark.parametrize("stride,kernel", [(2, 3), (2, 4), (4, 8), (8, 16)])
    def test_adjoint_identity(self, stride, kernel):
        # <conv(a), b> == <a, deconv(b)> with shared weights and no bias,
        # conv evaluated by the independent nested-loop oracle
        r = rng(stride * 31 + kernel)
        pad = (kernel - stride + 1) // 2
        a = r.normal(size=(2, 3, 2 * stride, 2 * stride))
        w = r.normal(size=(2, 3, kernel, kernel))
        b = r.normal(size=(2, 2, 2, 2))
        conv_a = naive_conv(a, w, np.zeros(2), stride=stride, pad=pad)
        assert conv_a.shape == b.shape
        p = ConvParams(weights=w, bias=np.zeros(3), stride=stride, transposed=True)
        deconv_b = deconv2d_forward(b, p)
        assert deconv_b.shape == a.shape
        lhs = float(np.vdot(conv_a, b))
        rhs = float(np.vdot(a, deconv_b))
        assert abs(lhs - rhs) < 1e-5 * max(1.0, abs(lhs))

    def test_zero_input_gives_bias(self):
        p = ConvParams(weights=rng(8).normal(size=(2, 3, 4, 4)),
                       bias=np.array([1.0, -2.0, 0.5]), stride=2, transposed=True)
        y = deconv2d_forward(np.zeros((1, 2, 3, 3)), p)
        assert np.allclose(y[0, 0], 1.0) and np.allclose(y[0, 1], -2.0)

    def test_backward_shapes_and_zero(self):
        r = rng(9)
        x = r.normal(size=(1, 2, 3, 3))
        p = ConvParams(weights=r.normal(size=(2, 4, 4, 4)), bias=np.zeros(4),
                       stride=2, transposed=True)
        dx, dw, db = deconv2d_backward(x, p, np.zeros((1, 4, 6, 6)))
        assert dx.shape == x.shape and dw.shape == p.weights.shape
        assert not dx.any() and not dw.any() and not db.any()


class TestRelu:
    def test_clamp(self):
        x = np.array([[[[-1.0, 0.0, 2.0]]]])
        assert relu_forward(x).ravel().tolist() == [0.0, 0.0, 2.0]

    def test_identity_on_positive(self):
        x = np.abs(rng(10).normal(size=(1, 2, 3, 3))) + 0.1
        assert np.array_equal(relu_forward(x), x)

    def test_backward_masks_and_zero_at_kink(self):
        x = np.array([[[[-1.0, 0.0, 2.0]]]])
        g = np.ones_like(x)
        assert relu_backward(x, g).ravel().tolist() == [0.0, 0.0, 1.0]


class TestMaxPool:
    def test_window_fixture(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        y, idx = maxpool_forward(x)
        assert y.ravel().tolist() == [4.0]
        dx = maxpool_backward(idx, np.array([[[[5.0]]]]))
        assert dx.ravel().tolist() == [0, 0, 0, 5.0]

    def test_tie_breaks_first_row_major(self):
        x = np.ones((1, 1, 2, 2))
        _, idx = maxpool_forward(x)
        assert idx.ravel().tolist() == [0]
        dx = maxpool_backward(idx, np.array([[[[1.0]]]]))
        assert dx[0, 0, 0, 0] == 1.0 and dx.sum() == 1.0

    def test_against_naive_oracle(self):
        x = rng(12).normal(size=(1, 2, 6, 6))
        y, _ = maxpool_forward(x)
        assert np.array_equal(y, naive_pool(x))

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            maxpool_forward(np.zeros((1, 1, 5, 6)))

    def test_backward_one_position_per_window(self):
        x = rng(13).normal(size=(2, 3, 8, 8))
        _, idx = maxpool_forward(x)
        dx = maxpool_backward(idx, np.ones((2, 3, 4, 4)))
        windows = dx.reshape(2, 3, 4, 2, 4, 2).transpose(0, 1, 2, 4, 3, 5)
        counts = (windows.reshape(2, 3, 4, 4, 4) != 0).sum(axis=-1)
        assert np.all(counts == 1)


class TestBatchNorm:
    def _params(self, c):
        return BNParams(gamma=np.ones(c), beta=np.zeros(c),
                        running_mean=np.zeros(c), running_var=np.ones(c))

    def test_train_normalizes(self):
        x = rng(14).normal(size=(4, 3, 5, 5)) * 3 + 2
        y, _ = batchnorm_forward(x, self._params(3), "train")
        assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-5
        assert np.abs(y.var(axis=(0, 2, 3)) - 1).max() < 1e-4

    def test_eval_identity_with_unit_stats(self):
        x = rng(15).normal(size=(2, 3, 4, 4))
        y, cache = batchnorm_forward(x, self._params(3), "eval")
        assert cache is None
        # only the epsilon in the denominator separates y from x
        assert np.abs(y - x).max() < 1e-4

    def test_running_stats_updated(self):
        p = self._params(2)
        x = rng(16).normal(size=(8, 2, 6, 6)) + 5.0
        batchnorm_forward(x, p, "train")
        # momentum 0.9: running mean moves 10% toward the batch mean of ~5
        assert np.all(p.running_mean > 0.4)
        batchnorm_forward(x, p, "eval")
        assert np.all(p.running_mean > 0.4)  # eval leaves stats untouched

    def test_backward_needs_train_cache(self):
        with pytest.raises(ArgumentError):
            batchnorm_backward(None, np.zeros((1, 1, 2, 2)))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            batchnorm_forward(np.zeros((1, 4, 2, 2)), self._params(3), "train")


class TestMseLoss:
    def test_zero_when_equal(self):
        x = rng(17).random((2, 2, 3, 3))
        loss, grad = mse_loss(x, x)
        assert loss == 0 and not grad.any()

    def test_per_element_fixture(self):
        pred = np.array([[[[0.0, 0.0]]]])
        target = np.array([[[[1.0, 0.0]]]])
        loss, grad = mse_loss(pred, target)
        assert loss == pytest.approx(0.5)
        assert grad.ravel().tolist() == [-1.0, 0.0]

    def test_per_sample_reduction(self):
        pred = np.zeros((2, 1, 1, 2))
        target = np.ones((2, 1, 1, 2))
        loss_e, grad_e = mse_loss(pred, target, "per_element")
        loss_s, grad_s = mse_loss(pred, target, "per_sample")
        assert loss_e == pytest.approx(1.0)
        assert loss_s == pytest.approx(2.0)
        assert np.allclose(grad_s, 2 * grad_e)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))

    def test_unknown_reduction(self):
        with pytest.raises(ArgumentError):
            mse_loss(np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1, 1)), "mean")
