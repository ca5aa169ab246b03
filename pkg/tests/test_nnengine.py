import numpy as np
import pytest

from mlrx.nnengine import (
    Adam,
    BatchNorm,
    Conv2D,
    Dense,
    ResNetBlock,
    SeparableConv2D,
    Sequential,
    Tensor,
    bce_with_logits,
    load_arrays,
    no_grad,
    save_arrays,
)
from mlrx.nnengine import tensor as T
from mlrx.nnengine.functional import conv2d, depthwise_conv2d
from mlrx.nnengine.gradcheck import max_relative_error, numeric_grad
from mlrx.nnengine.layers import Activation, SpatialMean

# every (kernel, dilation) pair used by the receiver CNNs
TABLE_CONFIGS = [
    ((1, 1), (1, 1)),
    ((5, 3), (1, 1)),
    ((3, 2), (1, 1)),
    ((5, 2), (2, 1)),
    ((7, 2), (3, 1)),
    ((3, 3), (1, 1)),
    ((5, 3), (2, 1)),
    ((7, 3), (3, 2)),
    ((9, 3), (4, 3)),
]


def _check_module(module, x, training=True, seed=0):
    """Gradient of a random projection of the output vs finite differences."""
    rng = np.random.default_rng(seed)
    probe = rng.standard_normal(module(x, training).shape)

    def loss():
        return float((module(x, training).data * probe).sum())

    out = module(x, training)
    (out * probe).sum().backward()
    errors = {"input": max_relative_error(x.grad, numeric_grad(loss, x))}
    for name, p in module.named_parameters():
        errors[name] = max_relative_error(p.grad, numeric_grad(loss, p))
    return errors


@pytest.fixture
def x():
    return Tensor(np.random.default_rng(1).standard_normal((2, 6, 4, 3)), requires_grad=True)


class TestLayerGradients:
    def test_conv2d(self, x):
        errs = _check_module(Conv2D(3, 5, (3, 2), (2, 1), activation="elu", rng=np.random.default_rng(0)), x)
        assert max(errs.values()) < 1e-4, errs

    def test_separable(self, x):
        errs = _check_module(SeparableConv2D(3, 4, (5, 3), (1, 2), rng=np.random.default_rng(0)), x)
        assert max(errs.values()) < 1e-4, errs

    @pytest.mark.parametrize("training", [True, False])
    def test_batchnorm(self, x, training):
        bn = BatchNorm(3)
        bn.gamma.data = np.array([0.5, 1.5, -1.0])
        bn.beta.data = np.array([0.1, 0.0, 0.3])
        bn.buffers["running_mean"][:] = [0.1, -0.2, 0.3]
        errs = _check_module(bn, x, training)
        assert max(errs.values()) < 1e-4, errs

    def test_resnet_block(self, x):
        errs = _check_module(ResNetBlock(3, (3, 2), (2, 1), rng=np.random.default_rng(0)), x)
        assert max(errs.values()) < 1e-4, errs

    def test_dense(self, x):
        errs = _check_module(Dense(6 * 4 * 3, 2, rng=np.random.default_rng(0)), x)
        assert max(errs.values()) < 1e-4, errs

    @pytest.mark.parametrize("kind", ["relu", "elu", "sigmoid"])
    def test_activation(self, x, kind):
        errs = _check_module(Activation(kind), x)
        assert max(errs.values()) < 1e-4, errs

    def test_spatial_mean(self, x):
        assert max(_check_module(SpatialMean(), x).values()) < 1e-4


class TestComplexOps:
    """Complex gradients follow dL/dRe + j dL/dIm."""

    def _rand(self, rng, shape):
        return Tensor(rng.standard_normal(shape) + 1j * rng.standard_normal(shape), requires_grad=True)

    def test_solve_matmul_chain(self):
        rng = np.random.default_rng(3)
        a0 = rng.standard_normal((2, 3, 3)) + 1j * rng.standard_normal((2, 3, 3))
        a = Tensor(a0 @ np.conj(np.swapaxes(a0, -1, -2)) + 3 * np.eye(3), requires_grad=True)
        b = self._rand(rng, (2, 3, 2))
        gamma = Tensor(np.array(0.7), requires_grad=True)

        def build():
            phase = T.exp(gamma * (1j * np.arange(3.0)))
            x = T.solve(a * phase, b)
            y = T.matmul(x, x.H) + T.diagonal(a)[..., None].conj()
            return T.real(T.tsum(T.abs2(y) + T.imag(y) * 0.3))

        build().backward()
        for t in (a, b, gamma):
            num = numeric_grad(lambda: float(build().data), t)
            assert max_relative_error(t.grad, num) < 1e-6

    def test_div_log_power(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        b = self._rand(rng, (4,))

        def build():
            return T.tsum(T.real(T.log10(a) * b / (b * b + 2.0)) + a**1.5)

        build().backward()
        for t in (a, b):
            assert max_relative_error(t.grad, numeric_grad(lambda: float(build().data), t)) < 1e-6

    def test_broadcast_and_indexing(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.standard_normal((3, 1, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)

        def build():
            c = a * b
            parts = T.concat([c[:, :2], T.stack([c[:, 3], c[:, 0]], axis=1)], axis=1)
            return T.tsum(T.clip(parts, -0.8, 0.8) ** 2) + T.mean(T.transpose(c, (2, 0, 1)).reshape(-1))

        build().backward()
        for t in (a, b):
            assert max_relative_error(t.grad, numeric_grad(lambda: float(build().data), t)) < 1e-6


class TestLayerExamples:
    def test_identity_conv(self, x):
        conv = Conv2D(3, 3)
        conv.weight.data = np.eye(3).reshape(1, 1, 3, 3)
        np.testing.assert_array_equal(conv(x).data, x.data)

    def test_zero_sepconv_resnet_is_skip(self, x):
        block = ResNetBlock(3, (3, 3), (1, 1))
        block.conv.pointwise.data[:] = 0
        np.testing.assert_array_equal(block(x, training=True).data, x.data)

    @pytest.mark.parametrize("kernel,dilation", TABLE_CONFIGS)
    def test_same_padding_preserves_dims(self, kernel, dilation):
        x = np.random.default_rng(0).standard_normal((1, 12, 2, 4))
        assert conv2d(x, np.ones(kernel + (4, 2)), dilation=dilation).shape == (1, 12, 2, 2)
        assert depthwise_conv2d(x, np.ones(kernel + (4,)), dilation).shape == x.shape

    def test_conv_matches_naive_loop(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 5, 4, 2))
        w = rng.standard_normal((3, 2, 2, 3))
        out = conv2d(x, w, dilation=(2, 1)).data
        # same padding: 2 rows above/below, 0 left / 1 right for (k=2, d=1)
        xp = np.pad(x, ((0, 0), (2, 2), (0, 1), (0, 0)))
        ref = np.zeros((1, 5, 4, 3))
        for i in range(5):
            for j in range(4):
                for a in range(3):
                    for b in range(2):
                        ref[0, i, j] += xp[0, i + 2 * a, j + b] @ w[a, b]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_batchnorm_inference_matches_training_stats(self, x):
        bn = BatchNorm(3)
        train_out = bn(x, training=True).data
        bn.buffers["running_mean"][:] = x.data.mean(axis=(0, 1, 2))
        bn.buffers["running_var"][:] = x.data.var(axis=(0, 1, 2))
        np.testing.assert_allclose(bn(x, training=False).data, train_out, atol=1e-6)

    def test_batchnorm_running_average(self, x):
        bn = BatchNorm(3)
        bn(x, training=True)
        np.testing.assert_allclose(bn.buffers["running_mean"], 0.01 * x.data.mean(axis=(0, 1, 2)))


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_lr_sign(self):
        p = Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True)
        opt = Adam([p], lr=1e-3)
        p.grad = np.array([3.0, -0.2, 1e-2])
        opt.step()
        np.testing.assert_allclose(p.data - 1.0, -1e-3 * np.sign([3.0, -0.2, 1e-2]), rtol=1e-5)

    def test_quadratic_converges(self):
        w = Tensor(np.array(1.0), requires_grad=True)
        opt = Adam([w], lr=1e-1)
        for _ in range(200):
            opt.zero_grad()
            (w * w).backward()
            opt.step()
        assert abs(w.item()) < 1e-2


class TestBce:
    def test_zero_llr_is_one_bit(self):
        loss = bce_with_logits(np.zeros((1, 10)), np.random.default_rng(0).integers(0, 2, (1, 10)))
        assert loss.item() == pytest.approx(10.0, rel=1e-15)

    def test_saturated_correct(self):
        assert bce_with_logits(np.array([[40.0]]), np.array([[1]])).item() < 1e-10

    def test_gradient(self):
        rng = np.random.default_rng(0)
        z = Tensor(rng.standard_normal((3, 7)) * 3, requires_grad=True)
        bits = rng.integers(0, 2, (3, 7))
        mask = rng.random((3, 7)) > 0.3
        bce_with_logits(z, bits, mask).backward()
        num = numeric_grad(lambda: bce_with_logits(z.data, bits, mask).item(), z)
        assert max_relative_error(z.grad, num) < 1e-4
        expected = (1 / (1 + np.exp(-z.data)) - bits) * mask / (3 * np.log(2))
        np.testing.assert_allclose(z.grad, expected, rtol=1e-12)


class TestPlumbing:
    def test_no_grad_builds_no_graph(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = p * 2
        assert not out.requires_grad

    def test_checkpoint_roundtrip(self, tmp_path):
        arrays = {"a.w": np.arange(6.0).reshape(2, 3), "gamma": np.array(3.14), "c": np.array([1 + 2j])}
        save_arrays(tmp_path / "ck.bin", arrays)
        loaded = load_arrays(tmp_path / "ck.bin")
        assert list(loaded) == list(arrays)
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])

    def test_state_dict_roundtrip(self):
        net = Sequential([Conv2D(2, 3, (3, 3), rng=np.random.default_rng(0)), ResNetBlock(3, (3, 3), (1, 1))])
        other = Sequential([Conv2D(2, 3, (3, 3), rng=np.random.default_rng(9)), ResNetBlock(3, (3, 3), (1, 1))])
        other.load_state_dict(net.state_dict())
        x = np.random.default_rng(1).standard_normal((1, 4, 4, 2))
        np.testing.assert_array_equal(net(x).data, other(x).data)
