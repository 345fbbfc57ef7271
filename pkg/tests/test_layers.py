"""Residual block, attention gate and group norm behavior."""

import numpy as np
import pytest

from boundaryseg import autodiff as ad
from boundaryseg.autodiff import Tensor
from boundaryseg.errors import ContractViolation
from boundaryseg.layers import (AttentionGate, GroupNorm, ResidualBlock,
                                attention_gate_forward, group_norm_forward,
                                norm_groups, residual_block_forward)


def zero_block_params(block):
    for name, p in block.named_parameters("b"):
        if "conv" in name:
            p.data[...] = 0.0


class TestResidualBlock:
    def test_zeroed_convs_give_exact_identity(self):
        rng = np.random.default_rng(0)
        block = ResidualBlock(rng, 4)
        zero_block_params(block)
        x = Tensor(rng.standard_normal((1, 4, 5, 5, 5)).astype(np.float32))
        out = residual_block_forward(block, x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_shape_preserved(self):
        rng = np.random.default_rng(1)
        for channels, size in ((2, 4), (6, 3), (8, 5)):
            block = ResidualBlock(rng, channels)
            x = Tensor(rng.standard_normal((1, channels, size, size, size))
                       .astype(np.float32))
            assert block(x).data.shape == x.data.shape

    def test_not_identity_after_init(self):
        rng = np.random.default_rng(2)
        block = ResidualBlock(rng, 4)
        x = Tensor(rng.standard_normal((1, 4, 4, 4, 4)).astype(np.float32))
        assert not np.allclose(block(x).data, x.data)

    def test_channel_mismatch_rejected(self):
        block = ResidualBlock(np.random.default_rng(3), 4)
        with pytest.raises(ContractViolation, match="channels"):
            block(Tensor(np.zeros((1, 3, 4, 4, 4))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        block = ResidualBlock(rng, 4, dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 4, 4, 4, 4)), requires_grad=True,
                   dtype=np.float64)
        w = rng.standard_normal((1, 4, 4, 4, 4))

        def graph():
            return ad.reduce_sum(ad.mul(block(x), Tensor(w)))
        inputs = [x] + [p for _, p in block.named_parameters("b")]
        assert ad.finite_diff_check(graph, inputs) < 1e-4


class TestAttentionGate:
    def _gate_and_inputs(self, seed, enc_c=2, stream_c=3, size=4, dtype=np.float32):
        rng = np.random.default_rng(seed)
        gate = AttentionGate(rng, enc_c, stream_c, dtype=dtype)
        enc = Tensor(rng.standard_normal((1, enc_c, size, size, size)).astype(dtype))
        stream = Tensor(rng.standard_normal((1, stream_c, size, size, size)).astype(dtype))
        return gate, enc, stream

    def test_saturated_open_gate_passes_stream(self):
        gate, enc, stream = self._gate_and_inputs(0)
        gate.score.bias.data[...] = 20.0
        gated, amap = attention_gate_forward(gate, enc, stream)
        np.testing.assert_allclose(amap.data, 1.0, atol=1e-6)
        np.testing.assert_allclose(gated.data, stream.data, atol=1e-6)

    def test_saturated_closed_gate_blocks_stream(self):
        gate, enc, stream = self._gate_and_inputs(1)
        gate.score.bias.data[...] = -20.0
        gated, _ = gate(enc, stream)
        np.testing.assert_allclose(gated.data, 0.0, atol=1e-6)

    def test_gated_equals_stream_times_map_voxelwise(self):
        gate, enc, stream = self._gate_and_inputs(2)
        gated, amap = gate(enc, stream)
        n, c, d, h, w = stream.data.shape
        for ci in range(c):
            for zi in range(d):
                for yi in range(h):
                    for xi in range(w):
                        want = stream.data[0, ci, zi, yi, xi] * amap.data[0, 0, zi, yi, xi]
                        assert gated.data[0, ci, zi, yi, xi] == pytest.approx(want, rel=1e-6)

    def test_map_in_unit_interval_and_single_channel(self):
        for seed in range(10):
            gate, enc, stream = self._gate_and_inputs(seed)
            gated, amap = gate(enc, stream)
            assert amap.data.shape[1] == 1
            assert (amap.data > 0).all() and (amap.data < 1).all()
            assert gated.data.shape == stream.data.shape

    def test_spatial_mismatch_rejected(self):
        gate, enc, _ = self._gate_and_inputs(3)
        bad = Tensor(np.zeros((1, 3, 5, 4, 4), dtype=np.float32))
        with pytest.raises(ContractViolation, match="spatial"):
            gate(enc, bad)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        gate = AttentionGate(rng, 2, 3, dtype=np.float64)
        enc = Tensor(rng.standard_normal((1, 2, 3, 3, 3)), requires_grad=True,
                     dtype=np.float64)
        stream = Tensor(rng.standard_normal((1, 3, 3, 3, 3)), requires_grad=True,
                        dtype=np.float64)
        w = rng.standard_normal((1, 3, 3, 3, 3))

        def graph():
            gated, _ = gate(enc, stream)
            return ad.reduce_sum(ad.mul(gated, Tensor(w)))
        inputs = [enc, stream] + [p for _, p in gate.named_parameters("g")]
        assert ad.finite_diff_check(graph, inputs) < 1e-4


class TestGroupNorm:
    def test_constant_input_maps_to_zero_before_affine(self):
        norm = GroupNorm(4)  # gain 1, bias 0 at init: output == 0 for constant input
        x = Tensor(np.full((1, 4, 3, 3, 3), 7.0, dtype=np.float32))
        out = norm(x)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-5)

    def test_per_group_statistics(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((2, 8, 4, 4, 4)).astype(np.float32))
        out = group_norm_forward(x, 4, Tensor(np.ones(8, dtype=np.float32)),
                                 Tensor(np.zeros(8, dtype=np.float32)))
        grouped = out.data.reshape(2, 4, -1)
        assert np.abs(grouped.mean(axis=2)).max() < 1e-6
        assert np.abs(grouped.var(axis=2) - 1.0).max() < 1e-4

    def test_indivisible_groups_rejected(self):
        x = Tensor(np.zeros((1, 6, 2, 2, 2)))
        with pytest.raises(ContractViolation, match="divisible"):
            group_norm_forward(x, 4, Tensor(np.zeros(6)), Tensor(np.zeros(6)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((1, 8, 2, 2, 2)), requires_grad=True,
                   dtype=np.float64)
        gain = Tensor(rng.uniform(0.5, 1.5, 8), requires_grad=True, dtype=np.float64)
        bias = Tensor(rng.standard_normal(8) * 0.1, requires_grad=True, dtype=np.float64)
        w = rng.standard_normal((1, 8, 2, 2, 2))

        def graph():
            return ad.reduce_sum(ad.mul(ad.group_norm(x, 4, gain, bias), Tensor(w)))
        assert ad.finite_diff_check(graph, [x, gain, bias]) < 1e-4

    @pytest.mark.parametrize("channels,expected", [(1, 1), (3, 3), (4, 4), (6, 6),
                                                   (8, 8), (12, 6), (16, 8), (24, 8)])
    def test_norm_groups_divides_channels(self, channels, expected):
        g = norm_groups(channels)
        assert g == expected
        assert channels % g == 0 and g <= 8
