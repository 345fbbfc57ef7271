"""Tensor-engine tests: every op against its oracle, plus tape semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boundaryseg import autodiff as ad
from boundaryseg.autodiff import Tensor
from boundaryseg.errors import ContractViolation, GradientStateError, InvalidConfigError
from boundaryseg.losses import dice_loss

from reference_impls import naive_conv3d, naive_upsample2x_3d


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


class TestConv3d:
    def test_identity_kernel(self):
        x = Tensor(np.ones((1, 1, 4, 4, 4)))
        w = Tensor(np.ones((1, 1, 1, 1, 1)))
        out = ad.conv3d(x, w, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_strided_output_shape(self):
        x = Tensor(np.zeros((1, 1, 16, 16, 16)))
        w = Tensor(np.zeros((1, 1, 3, 3, 3)))
        out = ad.conv3d(x, w, stride=2, padding=1)
        # floor((16 + 2 - 3)/2) + 1 = 8
        assert out.data.shape == (1, 1, 8, 8, 8)

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 5, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        for stride, padding in ((1, 0), (1, 1), (2, 1)):
            got = ad.conv3d(t64(x), t64(w), t64(b), stride=stride, padding=padding).data
            want = naive_conv3d(x, w, b, stride=stride, padding=padding)
            np.testing.assert_allclose(got, want, rtol=1e-6)

    def test_channel_mismatch_names_dimension(self):
        x = Tensor(np.zeros((1, 3, 4, 4, 4)))
        w = Tensor(np.zeros((2, 2, 3, 3, 3)))
        with pytest.raises(ContractViolation, match="channels"):
            ad.conv3d(x, w, padding=1)

    def test_even_kernel_rejected(self):
        x = Tensor(np.zeros((1, 1, 4, 4, 4)))
        w = Tensor(np.zeros((1, 1, 2, 2, 2)))
        with pytest.raises(ContractViolation, match="odd"):
            ad.conv3d(x, w)

    @given(st.integers(4, 20), st.sampled_from([1, 3, 5]), st.integers(1, 3),
           st.integers(0, 2))
    @settings(max_examples=40, deadline=None)
    def test_output_size_formula(self, extent, kernel, stride, padding):
        expected = (extent + 2 * padding - kernel) // stride + 1
        if expected < 1:
            return
        x = Tensor(np.zeros((1, 1, extent, extent, extent), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, kernel, kernel, kernel), dtype=np.float32))
        out = ad.conv3d(x, w, stride=stride, padding=padding)
        assert out.data.shape[2:] == (expected,) * 3


class TestTrilinearUpsample:
    def test_constant_input(self):
        x = Tensor(np.full((1, 2, 3, 3, 3), 1.7))
        out = ad.trilinear_upsample(x)
        assert out.data.shape == (1, 2, 6, 6, 6)
        np.testing.assert_allclose(out.data, 1.7, rtol=1e-6)

    def test_single_voxel_broadcast(self):
        x = Tensor(np.full((1, 1, 1, 1, 1), -2.5))
        out = ad.trilinear_upsample(x)
        assert out.data.shape == (1, 1, 2, 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2, 2), -2.5))

    def test_depth_column_weights(self):
        x = t64(np.array([0.0, 1.0]).reshape(1, 1, 2, 1, 1))
        out = ad.trilinear_upsample(x)
        np.testing.assert_allclose(out.data[0, 0, :, 0, 0], [0.0, 0.25, 0.75, 1.0],
                                   atol=1e-12)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(9)
        vol = rng.standard_normal((3, 4, 2))
        got = ad.trilinear_upsample(t64(vol[None, None])).data[0, 0]
        np.testing.assert_allclose(got, naive_upsample2x_3d(vol), atol=1e-12)

    def test_factor_rejected(self):
        with pytest.raises(InvalidConfigError):
            ad.trilinear_upsample(Tensor(np.zeros((1, 1, 2, 2, 2))), factor=3)


class TestActivations:
    def test_sigmoid_symmetry_point(self):
        assert ad.sigmoid(Tensor(np.zeros(()))).item() == pytest.approx(0.5)

    def test_relu_definition(self):
        out = ad.relu(Tensor(np.array([-3.2, 3.2], dtype=np.float32)))
        np.testing.assert_allclose(out.data, [0.0, 3.2], rtol=1e-6)

    def test_sigmoid_gradient_at_zero(self):
        w = t64(np.zeros(()), requires_grad=True)

        def graph():
            return ad.sigmoid(w)
        err = ad.finite_diff_check(graph, [w], eps=1e-6)
        assert err < 1e-6
        ad.backward(ad.sigmoid(w))
        assert w.grad == pytest.approx(0.25, abs=1e-12)

    def test_dispatch(self):
        x = Tensor(np.array([1.0, -1.0], dtype=np.float32))
        np.testing.assert_array_equal(ad.activation("relu", x).data,
                                      ad.relu(x).data)
        np.testing.assert_array_equal(ad.activation("sigmoid", x).data,
                                      ad.sigmoid(x).data)
        with pytest.raises(ContractViolation):
            ad.activation("tanh", x)

    def test_sigmoid_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            out = ad.sigmoid(Tensor(rng.standard_normal((4, 4, 4)) * 5)).data
            assert (out > 0).all() and (out < 1).all()

    def test_relu_nonnegative(self):
        rng = np.random.default_rng(3)
        out = ad.relu(Tensor(rng.standard_normal((6, 6)))).data
        assert (out >= 0).all()

    def test_finite_on_extreme_inputs(self):
        x = Tensor(np.array([-1e6, -50.0, 0.0, 50.0, 1e6], dtype=np.float32))
        assert np.isfinite(ad.sigmoid(x).data).all()
        assert np.isfinite(ad.relu(x).data).all()


class TestElementwise:
    def test_additive_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((3, 3)).astype(np.float32))
        zeros = Tensor(np.zeros((3, 3), dtype=np.float32))
        np.testing.assert_array_equal(ad.add(x, zeros).data, x.data)

    def test_multiplicative_identity(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((3, 3)).astype(np.float32))
        ones = Tensor(np.ones((3, 3), dtype=np.float32))
        np.testing.assert_array_equal(ad.mul(x, ones).data, x.data)

    def test_mul_gradient_is_other_factor(self):
        rng = np.random.default_rng(4)
        a = t64(rng.standard_normal((2, 2, 2)), requires_grad=True)
        b = t64(rng.standard_normal((2, 2, 2)))

        def graph():
            return ad.reduce_sum(ad.mul(a, b))
        assert ad.finite_diff_check(graph, [a], eps=1e-6) < 1e-4
        ad.backward(ad.reduce_sum(ad.mul(a, b)))
        np.testing.assert_allclose(a.grad, b.data, rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractViolation, match="shape"):
            ad.add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))
        with pytest.raises(ContractViolation, match="shape"):
            ad.elementwise("mul", Tensor(np.zeros((2,))), Tensor(np.zeros((3,))))

    def test_scalar_broadcast_allowed(self):
        x = Tensor(np.full((2, 2), 3.0))
        np.testing.assert_allclose(ad.mul(x, 2.0).data, 6.0)
        np.testing.assert_allclose(ad.sub(1.0, x).data, -2.0)


class TestConcatSlice:
    def test_channel_order(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.standard_normal((1, 1, 2, 2, 2)).astype(np.float32))
        b = Tensor(rng.standard_normal((1, 1, 2, 2, 2)).astype(np.float32))
        cat = ad.concat_channels(a, b)
        assert cat.data.shape == (1, 2, 2, 2, 2)
        np.testing.assert_array_equal(cat.data[:, 0], a.data[:, 0])
        np.testing.assert_array_equal(cat.data[:, 1], b.data[:, 0])

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
    @settings(max_examples=30, deadline=None)
    def test_concat_then_slice_roundtrip(self, ca, cb, s):
        rng = np.random.default_rng(ca * 17 + cb * 5 + s)
        a = Tensor(rng.standard_normal((1, ca, s, s, s)).astype(np.float32))
        b = Tensor(rng.standard_normal((1, cb, s, s, s)).astype(np.float32))
        cat = ad.concat_channels(a, b)
        np.testing.assert_array_equal(ad.slice_channels(cat, 0, ca).data, a.data)
        np.testing.assert_array_equal(ad.slice_channels(cat, ca, ca + cb).data, b.data)

    def test_backward_splits_to_ones(self):
        a = t64(np.zeros((1, 2, 2, 2, 2)), requires_grad=True)
        b = t64(np.zeros((1, 3, 2, 2, 2)), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.concat_channels(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
        np.testing.assert_array_equal(b.grad, np.ones_like(b.data))

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ContractViolation, match="axis"):
            ad.concat_channels(Tensor(np.zeros((1, 1, 2, 2, 2))),
                               Tensor(np.zeros((1, 1, 3, 2, 2))))


class TestReduceSum:
    def test_values(self):
        assert ad.reduce_sum(Tensor(np.zeros((4, 4, 4)))).item() == 0.0
        assert ad.reduce_sum(Tensor(np.ones((4, 4, 4)))).item() == 64.0

    def test_gradient_all_ones(self):
        x = t64(np.random.default_rng(0).standard_normal((3, 3)), requires_grad=True)
        ad.backward(ad.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


class TestBackward:
    def test_linear_case(self):
        rng = np.random.default_rng(12)
        x = t64(rng.standard_normal((3, 3)))
        w = t64(rng.standard_normal((3, 3)), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.mul(w, x)))
        np.testing.assert_allclose(w.grad, x.data, rtol=1e-12)

    def test_sigmoid_times_constant(self):
        w = t64(np.zeros(()), requires_grad=True)
        c = 3.0
        ad.backward(ad.mul(ad.sigmoid(w), c))
        assert w.grad == pytest.approx(0.25 * c, abs=1e-12)

    def test_composite_conv_relu_sum(self):
        rng = np.random.default_rng(21)
        x = t64(rng.standard_normal((1, 1, 4, 4, 4)), requires_grad=True)
        w = t64(rng.standard_normal((2, 1, 3, 3, 3)) * 0.5, requires_grad=True)

        def graph():
            return ad.reduce_sum(ad.relu(ad.conv3d(x, w, padding=1)))
        assert ad.finite_diff_check(graph, [x, w], eps=1e-6) < 1e-4

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ContractViolation, match="scalar"):
            ad.backward(ad.mul(x, 2.0))

    def test_double_backward_rejected(self):
        x = Tensor(np.ones(()), requires_grad=True)
        loss = ad.mul(x, 2.0)
        ad.backward(loss)
        with pytest.raises(GradientStateError):
            ad.backward(loss)

    def test_stale_grads_rejected(self):
        x = Tensor(np.ones(()), requires_grad=True)
        ad.backward(ad.mul(x, 2.0))
        assert x.grad is not None
        with pytest.raises(GradientStateError, match="zero"):
            ad.backward(ad.mul(x, 3.0))

    def test_reused_tensor_accumulates_both_paths(self):
        x = t64(np.full((2, 2), 1.5), requires_grad=True)
        # f = sum(x*x + x): df/dx = 2x + 1
        ad.backward(ad.reduce_sum(ad.add(ad.mul(x, x), x)))
        np.testing.assert_allclose(x.grad, 2 * x.data + 1, rtol=1e-12)

    def test_aliased_gradient_buffers_do_not_cross_contaminate(self):
        # add hands the same gradient buffer to both parents; when one
        # parent later receives another contribution, the other parent's
        # pending gradient must stay untouched
        x = t64(np.full((3,), 1.0), requires_grad=True)
        a = ad.mul(x, 2.0)
        b = ad.mul(x, 3.0)
        s = ad.add(a, b)          # backward delivers (g, g) aliased
        t = ad.mul(a, 10.0)       # second consumer of a
        loss = ad.reduce_sum(ad.add(s, t))
        ad.backward(loss)
        # loss = sum(2x + 3x + 20x): dloss/dx = 25 everywhere
        np.testing.assert_allclose(x.grad, 25.0, rtol=1e-12)

    def test_diamond_fan_in_gradients(self):
        x = t64(np.array(2.0), requires_grad=True)
        y = ad.mul(x, x)           # x^2
        z = ad.add(ad.mul(y, 3.0), ad.mul(y, y))  # 3x^2 + x^4
        ad.backward(z)
        # dz/dx = 6x + 4x^3 = 12 + 32
        assert float(x.grad) == pytest.approx(44.0, rel=1e-12)

    def test_no_grad_suppresses_tape(self):
        x = Tensor(np.ones(()), requires_grad=True)
        with ad.no_grad():
            out = ad.mul(x, 2.0)
        assert out.node is None and not out.requires_grad


class TestFiniteDiffCheck:
    def test_linear_graph_near_exact(self):
        rng = np.random.default_rng(8)
        w = t64(rng.standard_normal((4, 4)), requires_grad=True)
        x = t64(rng.standard_normal((4, 4)))

        def graph():
            return ad.reduce_sum(ad.mul(w, x))
        assert ad.finite_diff_check(graph, [w]) < 1e-10

    def test_conv_sigmoid_dice_graph(self):
        rng = np.random.default_rng(3)
        x = t64(rng.standard_normal((1, 1, 4, 4, 4)), requires_grad=True)
        w = t64(rng.standard_normal((1, 1, 3, 3, 3)) * 0.5, requires_grad=True)
        target = Tensor((rng.random((1, 1, 4, 4, 4)) < 0.5).astype(np.float64))

        def graph():
            return dice_loss(ad.sigmoid(ad.conv3d(x, w, padding=1)), target)
        assert ad.finite_diff_check(graph, [x, w], eps=1e-6) < 1e-4

    def test_corrupted_gradient_detected(self):
        rng = np.random.default_rng(6)
        x = t64(rng.standard_normal((3, 3)), requires_grad=True)

        def doubled_grad(t):
            # forward 2*t, but backward deliberately reports 4 (x2 too big)
            def back(g):
                return (4.0 * g,)
            return ad._result("corrupt", [t], 2.0 * t.data, back)

        def graph():
            return ad.reduce_sum(doubled_grad(x))
        err = ad.finite_diff_check(graph, [x], eps=1e-6)
        assert err == pytest.approx(1.0, abs=1e-6)
        assert err > 1e-4  # the check fails, as it must


@pytest.mark.parametrize("case_seed", range(20))
def test_gradients_match_fd_across_seeds(case_seed):
    """Randomized op graphs at 64-bit stay within 1e-4 of finite differences."""
    rng = np.random.default_rng(case_seed)
    x = t64(rng.standard_normal((1, 2, 3, 3, 3)), requires_grad=True)
    w = t64(rng.standard_normal((2, 2, 3, 3, 3)) * 0.5, requires_grad=True)
    b = t64(rng.standard_normal(2) * 0.1, requires_grad=True)
    m = t64(rng.standard_normal((1, 1, 3, 3, 3)), requires_grad=True)

    def graph():
        conv = ad.conv3d(x, w, b, padding=1)
        gated = ad.mul(ad.relu(conv), ad.expand_channels(ad.sigmoid(m), 2))
        up = ad.trilinear_upsample(gated)
        return ad.reduce_sum(ad.mul(up, up))
    assert ad.finite_diff_check(graph, [x, w, b, m], eps=1e-5) < 1e-4
