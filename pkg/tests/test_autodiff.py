import numpy as np
import pytest

from radiomap import autodiff as ad
from radiomap.autodiff import Parameter, Tensor
from radiomap.models import UNet, UNetSpec


def numeric_grad(f, arr, step=1e-5):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        fp = f()
        arr[i] = old - step
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2.0 * step)
    return g


def assert_grads_match(build_loss, params, tol=1e-4):
    loss = build_loss()
    ad.zero_grads(params)
    ad.backward(loss)
    for p in params:
        num = numeric_grad(lambda: build_loss().item(), p.data)
        denom = np.maximum(np.abs(num), 1e-6)
        rel = np.max(np.abs(p.grad - num) / denom)
        assert rel < tol, f"relative error {rel}"


class TestConv2d:
    def test_identity_1x1(self):
        x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 5, 5)))
        k = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = ad.conv2d(x, k, b)
        assert np.array_equal(out.data, x.data)

    def test_zero_input_gives_bias(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        k = Tensor(np.random.default_rng(1).standard_normal((3, 2, 3, 3)))
        b = Tensor(np.array([1.0, -2.0, 0.5]))
        out = ad.conv2d(x, k, b)
        for m, bias in enumerate(b.data):
            assert np.all(out.data[0, m] == bias)

    def test_hand_convolution_center(self):
        x = Tensor(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
        k = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = ad.conv2d(x, k, b)
        assert out.data[0, 0, 1, 1] == 45.0

    def test_linearity_with_zero_bias(self):
        rng = np.random.default_rng(2)
        k = Tensor(rng.standard_normal((2, 3, 3, 3)))
        b = Tensor(np.zeros(2))
        x = rng.standard_normal((1, 3, 6, 6))
        y = rng.standard_normal((1, 3, 6, 6))
        a, be = 1.7, -0.6
        lhs = ad.conv2d(Tensor(a * x + be * y), k, b).data
        rhs = a * ad.conv2d(Tensor(x), k, b).data + be * ad.conv2d(Tensor(y), k, b).data
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_shape_validation(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ValueError):
            ad.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
        with pytest.raises(ValueError):
            ad.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros(1)))

    @pytest.mark.parametrize("padding", ["zeros", "circular"])
    def test_gradients(self, padding):
        rng = np.random.default_rng(5)
        x = Parameter(rng.standard_normal((2, 3, 5, 5)))
        k = Parameter(0.4 * rng.standard_normal((4, 3, 3, 3)))
        b = Parameter(0.1 * rng.standard_normal(4))
        t = Tensor(rng.standard_normal((2, 4, 5, 5)))
        assert_grads_match(lambda: ad.mse_loss(ad.conv2d(x, k, b, padding), t),
                           [x, k, b])


class TestActivations:
    def test_relu_values(self):
        out = ad.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_relu_subgradient_zero_at_zero(self):
        x = Parameter(np.array([0.0]))
        ad.backward(ad.weighted_mse_loss(ad.relu(x), Tensor(np.array([-1.0])),
                                         np.array([0.5])))
        assert x.grad[0] == 0.0

    def test_sigmoid_values(self):
        out = ad.sigmoid(Tensor(np.array([0.0, np.log(3.0)])))
        assert out.data[0] == pytest.approx(0.5, abs=1e-15)
        assert out.data[1] == pytest.approx(0.75, abs=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(6)
        x = Parameter(rng.standard_normal((3, 4)))
        t = Tensor(rng.standard_normal((3, 4)))
        assert_grads_match(lambda: ad.mse_loss(ad.relu(x), t), [x])
        assert_grads_match(lambda: ad.mse_loss(ad.sigmoid(x), t), [x])


class TestPooling:
    def test_simple_patch(self):
        out = ad.maxpool2(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)))
        assert out.data.reshape(-1)[0] == 4.0

    def test_constant_grid(self):
        out = ad.maxpool2(Tensor(np.full((1, 2, 4, 4), 3.3)))
        assert out.data.shape == (1, 2, 2, 2)
        assert np.all(out.data == 3.3)

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError):
            ad.maxpool2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_gradient_routes_to_argmax(self):
        x = Parameter(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = ad.maxpool2(x)
        ad.backward(ad.weighted_mse_loss(out, Tensor(np.zeros_like(out.data)),
                                         np.full_like(out.data, 0.5)))
        # d/dx of max^2*0.5 -> grad 4 at the max, 0 elsewhere
        assert x.grad[0, 0, 1, 1] == 4.0
        assert np.sum(x.grad != 0) == 1

    def test_tie_break_first_in_scan_order(self):
        x = Parameter(np.full((1, 1, 2, 2), 7.0))
        out = ad.maxpool2(x)
        ad.backward(ad.weighted_mse_loss(out, Tensor(np.zeros((1, 1, 1, 1))),
                                         np.ones((1, 1, 1, 1))))
        assert x.grad[0, 0, 0, 0] != 0.0
        assert np.sum(x.grad != 0) == 1

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x = Parameter(rng.standard_normal((2, 3, 4, 4)))
        t = Tensor(rng.standard_normal((2, 3, 2, 2)))
        assert_grads_match(lambda: ad.mse_loss(ad.maxpool2(x), t), [x])


class TestUpsample:
    def test_duplication(self):
        out = ad.upsample2(Tensor(np.array([[1.0]]).reshape(1, 1, 1, 1)))
        assert np.array_equal(out.data.reshape(2, 2), np.ones((2, 2)))

    def test_shape_doubling(self):
        out = ad.upsample2(Tensor(np.zeros((2, 3, 5, 7))))
        assert out.data.shape == (2, 3, 10, 14)

    def test_backward_sums_duplicates(self):
        x = Parameter(np.zeros((1, 1, 2, 2)))
        up = ad.upsample2(x)
        # loss = sum over upsampled entries of (x - 1)^2 * 0.5 -> grad -4
        loss = ad.weighted_mse_loss(up, Tensor(np.ones_like(up.data)),
                                    np.full_like(up.data, 0.5))
        ad.backward(loss)
        assert np.all(x.grad == -4.0)

    def test_maxpool_inverts_upsample(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 4, 6, 6))
        restored = ad.maxpool2(ad.upsample2(Tensor(x)))
        assert np.array_equal(restored.data, x)

    def test_gradients(self):
        rng = np.random.default_rng(9)
        x = Parameter(rng.standard_normal((1, 2, 3, 3)))
        t = Tensor(rng.standard_normal((1, 2, 6, 6)))
        assert_grads_match(lambda: ad.mse_loss(ad.upsample2(x), t), [x])


class TestConcat:
    def test_channel_addition(self):
        a = Tensor(np.zeros((1, 2, 4, 4)))
        b = Tensor(np.ones((1, 3, 4, 4)))
        out = ad.concat_channels(a, b)
        assert out.data.shape == (1, 5, 4, 4)
        assert np.all(out.data[:, :2] == 0) and np.all(out.data[:, 2:] == 1)

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ad.concat_channels(Tensor(np.zeros((1, 1, 4, 4))),
                               Tensor(np.zeros((1, 1, 5, 4))))

    def test_slices_recover_inputs(self):
        rng = np.random.default_rng(10)
        a = rng.standard_normal((2, 2, 3, 3))
        b = rng.standard_normal((2, 4, 3, 3))
        out = ad.concat_channels(Tensor(a), Tensor(b)).data
        assert np.array_equal(out[:, :2], a)
        assert np.array_equal(out[:, 2:], b)

    def test_gradients(self):
        rng = np.random.default_rng(11)
        a = Parameter(rng.standard_normal((1, 2, 3, 3)))
        b = Parameter(rng.standard_normal((1, 1, 3, 3)))
        t = Tensor(rng.standard_normal((1, 3, 3, 3)))
        assert_grads_match(lambda: ad.mse_loss(ad.concat_channels(a, b), t),
                           [a, b])


class TestLosses:
    def test_mse_zero_on_match(self):
        x = Tensor(np.full((3, 3), 0.7))
        assert ad.mse_loss(x, Tensor(x.data.copy())).item() == 0.0

    def test_mse_unit_error(self):
        pred = Tensor(np.array([1.0, 1.0]))
        target = Tensor(np.array([0.0, 0.0]))
        assert ad.mse_loss(pred, target).item() == 1.0

    def test_weighted_one_hot(self):
        pred = Tensor(np.array([0.3, 0.0]))
        target = Tensor(np.array([0.0, 0.0]))
        w = np.array([2.0, 0.0])
        assert ad.weighted_mse_loss(pred, target, w).item() == pytest.approx(0.18)

    def test_uniform_weights_equal_mse(self):
        rng = np.random.default_rng(12)
        pred = rng.standard_normal((4, 5))
        target = rng.standard_normal((4, 5))
        mse = ad.mse_loss(Tensor(pred), Tensor(target)).item()
        wmse = ad.weighted_mse_loss(Tensor(pred), Tensor(target),
                                    np.full((4, 5), 1.0 / 20)).item()
        assert wmse == pytest.approx(mse, rel=1e-12)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            ad.weighted_mse_loss(Tensor(np.zeros(2)), Tensor(np.zeros(2)),
                                 np.array([1.0, -1.0]))


class TestBackward:
    def test_linear_loss_unit_grads(self):
        # 0.5 (p - (p0 - 1))^2 summed is locally linear with slope 1 at p0
        p = Parameter(np.array([1.0, 2.0, 3.0]))
        loss = ad.weighted_mse_loss(p, Tensor(p.data - 1.0), np.full(3, 0.5))
        ad.backward(loss)
        assert np.allclose(p.grad, np.ones(3))

    def test_quadratic_grad(self):
        p = Parameter(np.array([3.0]))
        loss = ad.weighted_mse_loss(p, Tensor(np.array([0.0])), np.array([1.0]))
        ad.backward(loss)
        assert p.grad[0] == pytest.approx(6.0)

    def test_accumulation_until_zeroed(self):
        p = Parameter(np.array([2.0]))
        for _ in range(3):
            ad.backward(ad.weighted_mse_loss(p, Tensor(np.array([0.0])),
                                             np.array([1.0])))
        assert p.grad[0] == pytest.approx(12.0)
        ad.zero_grads([p])
        assert p.grad is None

    def test_rejects_non_scalar(self):
        p = Parameter(np.ones(3))
        with pytest.raises(ValueError):
            ad.backward(ad.relu(p))

    def test_shared_node_gradient_sums(self):
        # the same intermediate feeds both concat slots; grads add up
        p = Parameter(np.full((1, 1, 1, 1), 1.5))
        h = ad.relu(p)
        loss = ad.weighted_mse_loss(ad.concat_channels(h, h),
                                    Tensor(np.zeros((1, 2, 1, 1))),
                                    np.ones((1, 2, 1, 1)))
        ad.backward(loss)
        # loss = 2 h^2 -> dL/dp = 4 * 1.5
        assert p.grad[0, 0, 0, 0] == pytest.approx(6.0)


class TestFullNetworkGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_two_stage_unet(self, seed):
        rng = np.random.default_rng(seed)
        net = UNet(UNetSpec(2, (3, 4)), seed=seed)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        t = Tensor(rng.standard_normal((1, 1, 4, 4)))
        assert_grads_match(lambda: ad.mse_loss(net.forward(x), t),
                           net.parameters())


class TestShiftEquivariance:
    def test_circular_conv_relu_stack_commutes_with_shifts(self):
        rng = np.random.default_rng(13)
        layers = [
            (Tensor(0.5 * rng.standard_normal((4, 2, 3, 3))), Tensor(0.1 * rng.standard_normal(4))),
            (Tensor(0.5 * rng.standard_normal((3, 4, 3, 3))), Tensor(0.1 * rng.standard_normal(3))),
            (Tensor(0.5 * rng.standard_normal((1, 3, 3, 3))), Tensor(0.1 * rng.standard_normal(1))),
        ]

        def stack(arr):
            cur = Tensor(arr)
            for w, b in layers:
                cur = ad.relu(ad.conv2d(cur, w, b, padding="circular"))
            return cur.data

        x = rng.standard_normal((1, 2, 8, 8))
        base = stack(x)
        for dy, dx in [(1, 0), (0, 1), (3, 5), (-2, 4)]:
            shifted = np.roll(x, (dy, dx), axis=(2, 3))
            expected = np.roll(base, (dy, dx), axis=(2, 3))
            got = stack(shifted)
            assert np.array_equal(got, expected)  # bit for bit

    def test_zero_padding_breaks_equivariance(self):
        rng = np.random.default_rng(14)
        w = Tensor(rng.standard_normal((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        x = rng.standard_normal((1, 1, 8, 8))
        base = ad.conv2d(Tensor(x), w, b, padding="zeros").data
        shifted = np.roll(x, (1, 0), axis=(2, 3))
        got = ad.conv2d(Tensor(shifted), w, b, padding="zeros").data
        assert not np.array_equal(got, np.roll(base, (1, 0), axis=(2, 3)))
