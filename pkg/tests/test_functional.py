"""Tests for layer primitives: hand values, adjoint identities and gradient checks."""

import math

import numpy as np
import pytest


def _param(rng, name, *shape):
    from core.tensor import Parameter

    return Parameter(rng.normal(size=shape), name=name)


class TestConv2d:

    def test_scalar_multiply(self):
        from core import functional as F
        from core.tensor import Tensor

        out = F.conv2d(Tensor([[[[2.0]]]]), Tensor([[[[3.0]]]]))
        assert out.data.tolist() == [[[[6.0]]]]

    def test_identity_kernel(self):
        from core import functional as F
        from core.tensor import Tensor

        x = np.random.default_rng(0).random((1, 1, 5, 4))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(F.conv2d(Tensor(x), Tensor(w), pad=1).data, x)

    def test_all_ones_kernel(self):
        from core import functional as F
        from core.tensor import Tensor

        out = F.conv2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), Tensor(np.ones((1, 1, 2, 2))))
        assert out.data.tolist() == [[[[10.0]]]]

    def test_output_size(self):
        from core import functional as F
        from core.tensor import Tensor

        out = F.conv2d(Tensor(np.zeros((2, 3, 9, 7))), Tensor(np.zeros((4, 3, 3, 3))), stride=2, pad=1)
        assert out.shape == (2, 4, 5, 4)

    def test_channel_mismatch(self):
        from core import functional as F
        from core.exceptions import ShapeError
        from core.tensor import Tensor

        with pytest.raises(ShapeError, match="channels"):
            F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        from core import functional as F
        from core.exceptions import ShapeError
        from core.tensor import Tensor

        with pytest.raises(ShapeError):
            F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestConv2dTransposed:

    def test_identity_map(self):
        from core import functional as F
        from core.tensor import Tensor

        x = np.random.default_rng(1).random((1, 1, 3, 3))
        np.testing.assert_array_equal(F.conv2d_transposed(Tensor(x), Tensor([[[[1.0]]]])).data, x)

    def test_scatter(self):
        from core import functional as F
        from core.tensor import Tensor

        out = F.conv2d_transposed(Tensor([[[[1.0]]]]), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        assert out.data.tolist() == [[[[1.0, 1.0], [1.0, 1.0]]]]

    def test_output_size(self):
        from core import functional as F
        from core.tensor import Tensor

        out = F.conv2d_transposed(Tensor(np.zeros((1, 8, 5, 4))), Tensor(np.zeros((8, 3, 4, 4))), stride=2, pad=1)
        assert out.shape == (1, 3, 10, 8)

    @pytest.mark.parametrize("stride,pad,kernel,size", [(1, 0, 3, 9), (2, 1, 3, 9), (2, 1, 4, 10), (3, 0, 2, 8)])
    def test_adjoint_identity(self, stride, pad, kernel, size):
        from core import functional as F
        from core.tensor import Tensor

        rng = np.random.default_rng(stride * 10 + pad + kernel)
        x = rng.normal(size=(2, 3, size, size))
        w = rng.normal(size=(4, 3, kernel, kernel))
        y_shape = F.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).shape
        y = rng.normal(size=y_shape)

        lhs = float((F.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data * y).sum())
        back = F.conv2d_transposed(Tensor(y), Tensor(w), stride=stride, pad=pad).data
        assert back.shape == x.shape
        rhs = float((x * back).sum())
        assert lhs == pytest.approx(rhs, abs=1e-10)


class TestDenseOps:

    def test_linear_hand_case(self):
        from core import functional as F
        from core.tensor import Tensor

        out = F.linear(Tensor([[1.0, 2.0]]), Tensor([[1.0, 1.0], [1.0, -1.0]]), Tensor([0.0, 1.0]))
        assert out.data.tolist() == [[3.0, 0.0]]

    def test_linear_zero_weight_gives_bias(self):
        from core import functional as F
        from core.tensor import Tensor

        out = F.linear(Tensor(np.ones((3, 2))), Tensor(np.zeros((2, 2))), Tensor([4.0, 5.0]))
        np.testing.assert_array_equal(out.data, [[4.0, 5.0]] * 3)

    def test_linear_dim_mismatch(self):
        from core import functional as F
        from core.exceptions import ShapeError
        from core.tensor import Tensor

        with pytest.raises(ShapeError):
            F.linear(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 3))))

    def test_layer_norm_constant_row(self):
        from core import functional as F
        from core.tensor import Tensor

        out = F.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    def test_layer_norm_unit_row(self):
        from core import functional as F
        from core.tensor import Tensor

        out = F.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]])

    def test_layer_norm_zero_gamma(self):
        from core import functional as F
        from core.tensor import Tensor

        x = np.random.default_rng(2).normal(size=(4, 6))
        out = F.layer_norm(Tensor(x), Tensor(np.zeros(6)), Tensor(np.full(6, 5.0)))
        np.testing.assert_array_equal(out.data, np.full((4, 6), 5.0))

    def test_layer_norm_row_statistics(self):
        from core import functional as F
        from core.tensor import Tensor

        x = np.random.default_rng(3).normal(size=(5, 16)) * 4 + 2
        out = F.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        assert np.abs(out.mean(axis=1)).max() < 1e-10

    def test_softmax_values(self):
        from core import functional as F
        from core.tensor import Tensor

        np.testing.assert_allclose(F.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75])
        np.testing.assert_allclose(F.softmax(Tensor([2.0, 2.0, 2.0, 2.0])).data, [0.25] * 4)

    def test_softmax_rows_sum_to_one_and_shift_invariant(self):
        from core import functional as F
        from core.tensor import Tensor

        x = np.random.default_rng(4).normal(size=(6, 9)) * 30
        probs = F.softmax(Tensor(x), axis=-1).data
        assert np.abs(probs.sum(axis=-1) - 1.0).max() < 1e-12
        np.testing.assert_allclose(F.softmax(Tensor(x + 7.5), axis=-1).data, probs, atol=1e-15)

    def test_upsample_nearest(self):
        from core import functional as F
        from core.tensor import Tensor

        out = F.upsample_nearest(Tensor([[[[1.0, 2.0]]]]))
        assert out.data.tolist() == [[[[1.0, 1.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0]]]]

    def test_stack_gradient(self):
        from core import functional as F
        from core.tensor import Parameter

        a, b = Parameter(np.ones(2), name="a"), Parameter(np.ones(2), name="b")
        (F.stack([a, b]) * np.array([[1.0, 2.0], [3.0, 4.0]])).sum().backward()
        np.testing.assert_array_equal(b.grad, [3.0, 4.0])


class TestLosses:

    def test_bce_matches_closed_form(self):
        from core import functional as F
        from core.tensor import Tensor

        logits = np.array([-2.0, 0.0, 3.0])
        targets = np.array([0.0, 1.0, 1.0])
        expected = np.mean(-(targets * np.log(1 / (1 + np.exp(-logits))) + (1 - targets) * np.log(1 - 1 / (1 + np.exp(-logits)))))
        assert F.binary_cross_entropy_with_logits(Tensor(logits), targets).item() == pytest.approx(expected, rel=1e-12)

    def test_bce_extreme_logits_finite(self):
        from core import functional as F
        from core.tensor import Tensor

        value = F.binary_cross_entropy_with_logits(Tensor([1e4, -1e4]), np.array([0.0, 1.0])).item()
        assert np.isfinite(value)

    def test_smooth_l1_regions(self):
        from core import functional as F
        from core.tensor import Tensor

        value = F.smooth_l1_loss(Tensor([0.5, 3.0]), np.zeros(2), beta=1.0).item()
        assert value == pytest.approx((0.125 + 2.5) / 2)

    def test_l1_shape_mismatch(self):
        from core import functional as F
        from core.exceptions import ShapeError
        from core.tensor import Tensor

        with pytest.raises(ShapeError):
            F.l1_loss(Tensor(np.ones(3)), np.ones(4))


class TestGradients:

    def test_composed_conv_layer_norm_softmax(self):
        from core import functional as F
        from core.gradcheck import finite_diff_check

        rng = np.random.default_rng(5)
        x, w, b = _param(rng, "x", 1, 2, 5, 5), _param(rng, "w", 3, 2, 3, 3), _param(rng, "b", 3)
        gamma, beta = _param(rng, "gamma", 9), _param(rng, "beta", 9)
        weights = rng.normal(size=(3, 9))

        def loss():
            feats = F.conv2d(x, w, b, stride=2, pad=1).reshape(3, 9)
            return (F.softmax(F.layer_norm(feats, gamma, beta), axis=-1) * weights).sum()

        assert finite_diff_check(loss, [x, w, b, gamma, beta], eps=1e-5) < 1e-4

    def test_every_primitive_below_tolerance(self):
        from core.gradcheck import _op_cases, finite_diff_check

        rng = np.random.default_rng(6)
        for name, (loss, params) in _op_cases(rng).items():
            assert finite_diff_check(loss, params, eps=1e-5, skip_kinks=True) < 1e-4, name

    def test_torch_forward_values(self):
        torch = pytest.importorskip("torch")
        from core import functional as F
        from core.tensor import Tensor

        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 8, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        ours = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
        theirs = torch.nn.functional.conv2d(torch.tensor(x), torch.tensor(w), torch.tensor(b), stride=2, padding=1)
        np.testing.assert_allclose(ours, theirs.numpy(), atol=1e-12)

        y = rng.normal(size=(2, 4, 4, 3))
        wt = rng.normal(size=(4, 2, 4, 4))
        ours_t = F.conv2d_transposed(Tensor(y), Tensor(wt), stride=2, pad=1).data
        theirs_t = torch.nn.functional.conv_transpose2d(torch.tensor(y), torch.tensor(wt), stride=2, padding=1)
        np.testing.assert_allclose(ours_t, theirs_t.numpy(), atol=1e-12)

        rows = rng.normal(size=(5, 7))
        gamma, beta = rng.normal(size=7), rng.normal(size=7)
        ours_ln = F.layer_norm(Tensor(rows), Tensor(gamma), Tensor(beta), eps=1e-5).data
        theirs_ln = torch.nn.functional.layer_norm(
            torch.tensor(rows), (7,), torch.tensor(gamma), torch.tensor(beta), eps=1e-5
        )
        np.testing.assert_allclose(ours_ln, theirs_ln.numpy(), atol=1e-12)
