import numpy as np
import pytest

from softtrack import autodiff as ad
from softtrack.autodiff import Tensor


def conv2d_oracle(x, k, stride, pad):
    """Naive loop-nest convolution for comparison."""
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, oh, ow))
    for o in range(cout):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
                out[o, i, j] = np.sum(patch * k[o])
    return out


class TestForward:
    def test_conv_1x1_kernel_scales(self):
        x = Tensor(np.arange(12.0).reshape(1, 3, 4))
        k = Tensor(np.array([[[[2.5]]]]))
        out = ad.conv2d(x, k)
        assert np.allclose(out.values, 2.5 * x.values)

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((3, 3)))
        out = ad.matmul(a, Tensor(np.eye(3)))
        assert np.allclose(out.values, a.values)

    def test_softmax_closed_form(self):
        out = ad.softmax(Tensor(np.array([0.0, np.log(3.0)])))
        assert np.allclose(out.values, [0.25, 0.75])

    def test_softmax_shift_invariant(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(9)
        a = ad.softmax(Tensor(x)).values
        b = ad.softmax(Tensor(x + 123.456)).values
        assert np.max(np.abs(a - b)) < 1e-9

    def test_conv_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 6, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        for stride, pad in [(1, 0), (2, 1), (1, 2), (3, 0)]:
            got = ad.conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad).values
            assert np.allclose(got, conv2d_oracle(x, k, stride, pad), atol=1e-12)

    def test_log_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            ad.log(Tensor(np.array([1.0, 0.0])))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_forward_determinism(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 8, 8))
        k = rng.standard_normal((4, 2, 3, 3))
        a = ad.conv2d(Tensor(x), Tensor(k), stride=2).values
        b = ad.conv2d(Tensor(x), Tensor(k), stride=2).values
        assert np.array_equal(a, b)


class TestBackward:
    def test_product_rule_scalars(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = Tensor(np.array(-2.0), requires_grad=True)
        loss = ad.mul(x, y)
        loss.backward()
        assert x.grad == pytest.approx(-2.0)
        assert y.grad == pytest.approx(3.0)

    def test_relu_mask_with_zero_subgradient(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        ad.tsum(ad.relu(x)).backward()
        assert np.array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_fanout_accumulates(self):
        x = Tensor(np.array([1.5]), requires_grad=True)
        y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))  # x^2 + 3x -> dy/dx = 2x + 3
        ad.tsum(y).backward()
        assert x.grad[0] == pytest.approx(2 * 1.5 + 3.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError):
            x.backward()

    def test_masked_positions_get_zero_grad(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        mask = np.array([True, False, True])
        out = ad.tsum(ad.exp(ad.mask_fill(x, mask, -50.0)))
        out.backward()
        assert x.grad[0] == 0.0
        assert x.grad[2] == 0.0
        assert x.grad[1] == pytest.approx(np.exp(2.0))


class TestGradCheck:
    def test_linear_op_near_exact(self):
        report = ad.grad_check(lambda a: ad.tsum(ad.scale(a, 1.75)), [Tensor(np.linspace(-1, 1, 6))])
        assert report.max_rel_err < 1e-10

    def test_full_suite_under_tolerance(self):
        reports = ad.standard_grad_check_suite(seed=0)
        names = {r.name for r in reports}
        assert {"conv2d_s1", "softmax", "logsumexp", "matmul"} <= names
        for report in reports:
            assert report.max_rel_err < 1e-4, str(report)

    def test_softmax_log_composition(self):
        rng = np.random.default_rng(5)

        def build(z):
            p = ad.softmax(z)
            return ad.scale(ad.log(ad.tsum(ad.mul(p, ad.exp(z)))), -1.0)

        report = ad.grad_check(build, [Tensor(rng.standard_normal(8))], name="nce_core")
        assert report.max_rel_err < 1e-4

    def test_many_seeds_conv_and_softmax(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.standard_normal((2, 4, 4)))
            k = Tensor(rng.standard_normal((2, 2, 3, 3)))
            report = ad.grad_check(
                lambda a, b: ad.tsum(ad.relu(ad.conv2d(a, b, stride=1, pad=1))),
                [x, k],
                name=f"conv_relu_{seed}",
            )
            assert report.max_rel_err < 1e-4, str(report)
