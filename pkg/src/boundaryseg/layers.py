"""Composite building blocks: conv layers, group normalization wrappers,
residual blocks and the boundary-stream attention gate.

Parameters are plain requires_grad tensors; every layer yields them via
``named_parameters`` in a fixed order so checkpointing and the optimizer
see a stable inventory. Initialization draws convolution weights from a
fan-in-scaled zero-mean normal; all biases and norm shifts start at 0,
norm gains at 1.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation


def norm_groups(channels):
    """Largest divisor of ``channels`` not exceeding 8.

    Group statistics must tile the channel axis exactly; widths such as
    12 are not divisible by 8, so the group count backs off to the
    largest valid divisor.
    """
    for g in range(min(8, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv3d:
    """Cubic-kernel 3-D convolution layer with bias."""

    def __init__(self, rng, in_channels, out_channels, kernel, stride=1,
                 padding=None, dtype=np.float32):
        if padding is None:
            padding = kernel // 2
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel ** 3
        self.weight = Tensor(
            he_normal(rng, (out_channels, in_channels, kernel, kernel, kernel), fan_in, dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.conv3d(x, self.weight, self.bias, stride=self.stride,
                         padding=self.padding)

    def named_parameters(self, prefix):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class GroupNorm:
    """Per-(sample, group) normalization with per-channel affine."""

    def __init__(self, channels, groups=None, eps=1e-5, dtype=np.float32):
        self.channels = channels
        self.groups = norm_groups(channels) if groups is None else groups
        self.eps = eps
        self.gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.group_norm(x, self.groups, self.gain, self.bias, self.eps)

    def named_parameters(self, prefix):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


def group_norm_forward(x, groups, gain, bias, eps=1e-5):
    """Functional form; see :func:`boundaryseg.autodiff.group_norm`."""
    return ad.group_norm(x, groups, gain, bias, eps)


class ResidualBlock:
    """x + F(x) with F = norm -> relu -> conv -> norm -> relu -> conv.

    Both convolutions are 3x3x3, stride 1, pad 1 with equal in/out
    channels, so the block preserves shape; zeroing the conv parameters
    makes it exactly the identity.
    """

    def __init__(self, rng, channels, dtype=np.float32):
        self.channels = channels
        self.norm1 = GroupNorm(channels, dtype=dtype)
        self.conv1 = Conv3d(rng, channels, channels, 3, dtype=dtype)
        self.norm2 = GroupNorm(channels, dtype=dtype)
        self.conv2 = Conv3d(rng, channels, channels, 3, dtype=dtype)

    def __call__(self, x):
        if x.data.shape[1] != self.channels:
            raise ContractViolation(
                f"residual block: input has {x.data.shape[1]} channels, "
                f"block is configured for {self.channels}")
        h = self.conv1(ad.relu(self.norm1(x)))
        h = self.conv2(ad.relu(self.norm2(h)))
        return ad.add(x, h)

    def named_parameters(self, prefix):
        yield from self.norm1.named_parameters(f"{prefix}.norm1")
        yield from self.conv1.named_parameters(f"{prefix}.conv1")
        yield from self.norm2.named_parameters(f"{prefix}.norm2")
        yield from self.conv2.named_parameters(f"{prefix}.conv2")


def residual_block_forward(block, x):
    return block(x)


class AttentionGate:
    """Spatial gating unit of the boundary stream.

    Each input goes through its own 3x3x3 projection to a common channel
    count; the projections are summed, relu'd, scored by a 1x1x1 conv to
    a single channel and squashed by a sigmoid. The resulting map in
    (0, 1) multiplies the stream features, broadcast over channels.
    """

    def __init__(self, rng, encoder_channels, stream_channels,
                 inter_channels=None, dtype=np.float32):
        if inter_channels is None:
            # the scoring path must express a signed, class-specific edge
            # rule; very thin encoder widths starve it, so keep a floor
            inter_channels = max(8, encoder_channels)
        self.encoder_channels = encoder_channels
        self.stream_channels = stream_channels
        self.proj_encoder = Conv3d(rng, encoder_channels, inter_channels, 3, dtype=dtype)
        self.proj_stream = Conv3d(rng, stream_channels, inter_channels, 3, dtype=dtype)
        self.score = Conv3d(rng, inter_channels, 1, 1, dtype=dtype)

    def __call__(self, encoder_feat, stream_feat):
        if encoder_feat.data.shape[2:] != stream_feat.data.shape[2:]:
            raise ContractViolation(
                f"attention gate: spatial extents differ "
                f"({encoder_feat.data.shape[2:]} vs {stream_feat.data.shape[2:]})")
        fused = ad.relu(ad.add(self.proj_encoder(encoder_feat),
                               self.proj_stream(stream_feat)))
        attention_map = ad.sigmoid(self.score(fused))
        gated = ad.mul(stream_feat,
                       ad.expand_channels(attention_map, stream_feat.data.shape[1]))
        return gated, attention_map

    def named_parameters(self, prefix):
        yield from self.proj_encoder.named_parameters(f"{prefix}.proj_encoder")
        yield from self.proj_stream.named_parameters(f"{prefix}.proj_stream")
        yield from self.score.named_parameters(f"{prefix}.score")


def attention_gate_forward(gate, encoder_feat, stream_feat):
    return gate(encoder_feat, stream_feat)
