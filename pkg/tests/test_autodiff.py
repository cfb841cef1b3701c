import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbhx import autodiff as ad
from mbhx import gradcheck
from mbhx.autodiff import Tensor
from mbhx.errors import ContractViolation, NumericError


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def dense_from_depthwise(dw):
    """Express a depthwise kernel (C,k,k) as an equivalent dense (C,C,k,k) kernel."""
    c, k, _ = dw.shape
    dense = np.zeros((c, c, k, k))
    for i in range(c):
        dense[i, i] = dw[i]
    return dense


class TestConv2d:
    def test_zero_input_gives_zero_output(self):
        rng = np.random.default_rng(1)
        out = ad.conv2d(T(np.zeros((1, 1, 3, 3))), T(rng.standard_normal((1, 1, 3, 3))), T([0.0]))
        assert np.array_equal(out.data, np.zeros((1, 1, 3, 3)))

    def test_identity_kernel(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = ad.conv2d(T(x), T(k), T([0.0]), stride=1, padding="same")
        assert np.array_equal(out.data, x)

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 5, 6))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 5, 6))
        for n in range(2):
            for o in range(4):
                for y in range(5):
                    for xx in range(6):
                        ref[n, o, y, xx] = np.sum(xp[n, :, y:y + 3, xx:xx + 3] * k[o]) + b[o]
        out = ad.conv2d(T(x), T(k), T(b))
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("size,expected", [(8, 4), (7, 4), (5, 3), (1, 1)])
    def test_stride2_same_extent_is_ceil_half(self, size, expected):
        out = ad.conv2d(T(np.ones((1, 1, size, size))), T(np.ones((1, 1, 3, 3))), stride=2)
        assert out.shape == (1, 1, expected, expected)

    def test_valid_padding_shrinks(self):
        out = ad.conv2d(T(np.ones((1, 2, 6, 5))), T(np.ones((3, 2, 3, 3))), padding="valid")
        assert out.shape == (1, 3, 4, 3)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ContractViolation, match=r"\(1, 2, 3, 3\).*\(1, 3, 4, 4\)"):
            ad.conv2d(T(np.ones((1, 3, 4, 4))), T(np.ones((1, 2, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ContractViolation):
            ad.conv2d(T(np.ones((1, 1, 4, 4))), T(np.ones((1, 1, 2, 2))))

    def test_gradient_on_random_input(self):
        rng = np.random.default_rng(3)
        res = gradcheck.check_gradients(
            "conv2d", lambda x, k, b: ad.conv2d(x, k, b),
            [rng.standard_normal((1, 2, 8, 8)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)], rng)
        assert res.max_error < 1e-6, res.line()


class TestSeparable:
    def test_zero_input(self):
        rng = np.random.default_rng(0)
        out = ad.separable_conv2d(T(np.zeros((1, 2, 4, 4))), T(rng.standard_normal((2, 3, 3))),
                                  T(rng.standard_normal((3, 2, 1, 1))), T(np.zeros(3)))
        assert not out.data.any()

    def test_identity_kernels(self):
        x = np.random.default_rng(0).standard_normal((1, 3, 5, 5))
        dw = np.zeros((3, 3, 3))
        dw[:, 1, 1] = 1.0
        pw = np.eye(3).reshape(3, 3, 1, 1)
        out = ad.separable_conv2d(T(x), T(dw), T(pw), T(np.zeros(3)))
        assert np.array_equal(out.data, x)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_equals_composed_dense_convs(self, stride):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 3, 6, 6))
        dw = rng.standard_normal((3, 3, 3))
        pw = rng.standard_normal((4, 3, 1, 1))
        b = rng.standard_normal(4)
        sep = ad.separable_conv2d(T(x), T(dw), T(pw), T(b), stride=stride)
        mid = ad.conv2d(T(x), T(dense_from_depthwise(dw)), T(np.zeros(3)), stride=stride)
        ref = ad.conv2d(mid, T(pw), T(b))
        assert np.max(np.abs(sep.data - ref.data)) < 1e-12

    def test_depthwise_needs_one_filter_per_channel(self):
        with pytest.raises(ContractViolation):
            ad.depthwise_conv2d(T(np.ones((1, 3, 4, 4))), T(np.ones((2, 3, 3))))


class TestUpsample:
    @pytest.mark.parametrize("factor", [2, 4])
    def test_constant_preserved(self, factor):
        out = ad.upsample_bilinear(T(np.full((1, 2, 3, 5), 0.37)), factor)
        assert out.shape == (1, 2, 3 * factor, 5 * factor)
        np.testing.assert_allclose(out.data, 0.37, rtol=0, atol=1e-15)

    def test_closed_form_half_pixel_convention(self):
        # output i samples source (i + 0.5)/2 - 0.5 -> -0.25, 0.25, 0.75, 1.25, clamped to [0, 1]
        out = ad.upsample_bilinear(T([[[[0.0, 1.0]]]]), 2)
        np.testing.assert_allclose(out.data[0, 0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-15)
        assert np.all(np.diff(out.data[0, 0, 0]) >= 0)

    def test_factor_4_closed_form(self):
        out = ad.upsample_bilinear(T([[[[0.0, 1.0]]]]), 4)
        src = np.clip((np.arange(8) + 0.5) / 4 - 0.5, 0, 1)
        np.testing.assert_allclose(out.data[0, 0, 0], src, atol=1e-15)

    def test_unsupported_factor(self):
        with pytest.raises(ContractViolation):
            ad.upsample_bilinear(T(np.ones((1, 1, 2, 2))), 3)


class TestChannels:
    def test_concat_shape(self):
        out = ad.concat_channels(T(np.ones((1, 2, 4, 4))), T(np.zeros((1, 3, 4, 4))))
        assert out.shape == (1, 5, 4, 4)

    def test_concat_then_slice_roundtrip(self):
        x = np.random.default_rng(0).standard_normal((1, 2, 4, 4))
        out = ad.slice_channels(ad.concat_channels(T(x), T(np.zeros((1, 3, 4, 4)))), 0, 2)
        assert np.array_equal(out.data, x)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ContractViolation):
            ad.concat_channels(T(np.ones((1, 2, 4, 4))), T(np.ones((1, 2, 4, 5))))

    def test_concat_gradient_splits(self):
        a, b = T(np.ones((1, 1, 2, 2)), True), T(np.ones((1, 2, 2, 2)), True)
        w = np.arange(12.0).reshape(1, 3, 2, 2)
        ad.backward(ad.sum_all(ad.mul(ad.concat_channels(a, b), T(w))))
        assert np.array_equal(a.grad, w[:, :1])
        assert np.array_equal(b.grad, w[:, 1:])


class TestElementwise:
    def test_relu_values(self):
        assert ad.relu(T([-1.0, 2.0])).data.tolist() == [0.0, 2.0]

    def test_sigmoid_zero(self):
        assert ad.sigmoid(T([0.0])).data[0] == 0.5

    def test_sigmoid_strictly_inside_unit_interval(self):
        s = ad.sigmoid(T([-800.0, -40.0, 40.0, 800.0])).data
        assert np.all(s > 0) and np.all(s < 1)

    @pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.reduce_mean_abs, ad.reduce_mean_sq])
    def test_binary_shape_mismatch(self, op):
        with pytest.raises(ContractViolation):
            op(T(np.ones(3)), T(np.ones(4)))

    def test_reductions(self):
        x = T(np.ones((2, 3)))
        assert ad.reduce_mean_abs(x, x).item() == 0.0
        assert ad.reduce_mean_sq(x, x).item() == 0.0
        z = T(np.zeros((2, 3)))
        assert ad.reduce_mean_abs(x, z).item() == 1.0
        assert ad.reduce_mean_sq(x, z).item() == 1.0

    def test_l1_subgradient_at_zero_is_zero(self):
        a = T(np.array([0.5, 0.2]), True)
        ad.backward(ad.reduce_mean_abs(a, T([0.5, 0.0])))
        assert a.grad.tolist() == [0.0, 0.5]

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            T([np.nan])

    def test_operations_are_bit_deterministic(self):
        rng = np.random.default_rng(9)
        x, k = rng.standard_normal((2, 3, 9, 9)), rng.standard_normal((4, 3, 3, 3))
        a = ad.conv2d(T(x), T(k), stride=2).data
        b = ad.conv2d(T(x), T(k), stride=2).data
        assert a.tobytes() == b.tobytes()


class TestBackward:
    def test_sum_gives_ones(self):
        p = T(np.random.default_rng(0).standard_normal((2, 3)), True)
        ad.backward(ad.sum_all(p))
        assert np.array_equal(p.grad, np.ones((2, 3)))

    def test_half_squared_norm_gives_p(self):
        p = T(np.random.default_rng(0).standard_normal((4,)), True)
        ad.backward(ad.scalar_mul(ad.sum_all(ad.mul(p, p)), 0.5))
        np.testing.assert_allclose(p.grad, p.data, rtol=0, atol=1e-15)

    def test_repeated_calls_accumulate(self):
        p = T(np.ones(3), True)
        root = ad.sum_all(p)
        ad.backward(root)
        ad.backward(root)
        assert p.grad.tolist() == [2.0, 2.0, 2.0]
        p.zero_grad()
        assert not p.grad.any()

    def test_non_scalar_root(self):
        with pytest.raises(ContractViolation):
            ad.backward(T(np.ones(3), True))

    def test_shared_subexpression_visited_once(self):
        p = T(np.array([3.0]), True)
        q = ad.mul(p, p)
        ad.backward(ad.sum_all(ad.add(q, q)))
        assert p.grad.tolist() == [12.0]

    def test_frozen_node_gets_no_grad_but_passes_gradient(self):
        x = T(np.random.default_rng(0).standard_normal((1, 1, 4, 4)), True)
        k = T(np.random.default_rng(1).standard_normal((1, 1, 3, 3)), False)
        ad.backward(ad.sum_all(ad.conv2d(x, k)))
        assert k.grad is None
        assert np.abs(x.grad).sum() > 0


def test_full_op_suite_passes():
    results = gradcheck.op_checks(seed=0)
    bad = [r.line() for r in results if not r.passed]
    assert not bad, bad


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_separable_gradient_random_seeds(seed):
    rng = np.random.default_rng(seed)
    res = gradcheck.check_gradients(
        "sep", lambda x, d, p, b: ad.separable_conv2d(x, d, p, b, stride=2),
        [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((2, 3, 3)),
         rng.standard_normal((3, 2, 1, 1)), rng.standard_normal(3)], rng)
    assert res.passed, res.line()
