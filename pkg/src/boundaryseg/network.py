"""Boundary-aware encoder-decoder network.

The main branch is an asymmetric encoder-decoder: a stem conv, per-level
(residual block, strided conv) pairs that halve resolution and double
width, a residual bottleneck, and a decoder that per level projects
channels down 1x1x1, upsamples trilinearly and adds the encoder skip
before a residual block. A parallel boundary stream runs one attention
gate per level from coarsest to finest: the first gate's stream input is
the upsampled bottleneck concatenated with the previous-resolution
encoder features and fused by a residual block; later gates consume the
upsampled previous gate output. The decoder output is concatenated with
the final gate output and mapped to 2 sigmoid channels (foreground =
kidneys+tumor, tumor); a second 1x1x1 head maps the gate output to
2-channel boundary probabilities.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, InvalidConfigError
from .layers import AttentionGate, Conv3d, ResidualBlock


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters.

    input_size: cubic crop edge, divisible by 2**levels
    base_filters: stem width; encoder widths double per level
    levels: number of downsampling stages
    bottleneck_blocks: residual blocks at the lowest resolution
    """

    input_size: int = 32
    base_filters: int = 4
    levels: int = 2
    bottleneck_blocks: int = 2

    def validate(self):
        if self.levels < 1:
            raise InvalidConfigError(f"levels must be >= 1, got {self.levels}")
        if self.base_filters < 1:
            raise InvalidConfigError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.bottleneck_blocks < 1:
            raise InvalidConfigError(
                f"bottleneck_blocks must be >= 1, got {self.bottleneck_blocks}")
        if self.input_size < 2 ** self.levels or self.input_size % (2 ** self.levels) != 0:
            raise InvalidConfigError(
                f"input_size {self.input_size} must be divisible by 2^levels = {2 ** self.levels}")

    @classmethod
    def desk_default(cls):
        return cls(input_size=32, base_filters=4, levels=2, bottleneck_blocks=2)

    @classmethod
    def paper_preset(cls):
        """176^3 crops, 16 stem filters, 4 bottleneck residual blocks."""
        return cls(input_size=176, base_filters=16, levels=4, bottleneck_blocks=4)

    def encoder_widths(self):
        """Channel width at each resolution, stem through bottleneck."""
        return [self.base_filters * 2 ** i for i in range(self.levels + 1)]

    def stream_width(self):
        """Boundary-stream width: upsampled bottleneck concatenated with
        the previous-resolution encoder features."""
        return 3 * self.base_filters * 2 ** (self.levels - 1)

    def to_text(self):
        return "".join(f"{k} = {getattr(self, k)}\n" for k in (
            "input_size", "base_filters", "levels", "bottleneck_blocks"))

    @classmethod
    def from_text(cls, text):
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfigError(f"network config: cannot parse line {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key] = val
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values):
        known = {"input_size", "base_filters", "levels", "bottleneck_blocks"}
        unknown = set(values) - known
        if unknown:
            raise InvalidConfigError(f"network config: unknown keys {sorted(unknown)}")
        kwargs = {k: int(v) for k, v in values.items()}
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class ForwardOutputs:
    """Per-voxel sigmoid probabilities of both streams.

    Channel 0 = foreground (kidneys + tumor), channel 1 = tumor, in both
    seg_probs and boundary_probs; shape [N, 2, S, S, S].
    """

    seg_probs: ad.Tensor
    boundary_probs: ad.Tensor


class BoundaryAwareNet:
    """Assembled network; build via :func:`build_network`."""

    def __init__(self, config, rng_seed, dtype=np.float32):
        config.validate()
        self.config = config
        self.rng_seed = rng_seed
        self.dtype = dtype
        rng = np.random.default_rng(rng_seed)
        f = config.base_filters
        levels = config.levels
        widths = config.encoder_widths()

        self.stem = Conv3d(rng, 1, f, 3, dtype=dtype)
        self.encoder_blocks = [ResidualBlock(rng, widths[i], dtype=dtype)
                               for i in range(levels)]
        self.encoder_downs = [Conv3d(rng, widths[i], widths[i + 1], 3, stride=2, dtype=dtype)
                              for i in range(levels)]
        self.bottleneck = [ResidualBlock(rng, widths[levels], dtype=dtype)
                           for _ in range(config.bottleneck_blocks)]
        self.decoder_reduces = [Conv3d(rng, widths[i + 1], widths[i], 1, dtype=dtype)
                                for i in reversed(range(levels))]
        self.decoder_blocks = [ResidualBlock(rng, widths[i], dtype=dtype)
                               for i in reversed(range(levels))]
        sw = config.stream_width()
        self.fuse_block = ResidualBlock(rng, sw, dtype=dtype)
        self.gates = [AttentionGate(rng, widths[levels - 1 - j], sw, dtype=dtype)
                      for j in range(levels)]
        self.boundary_head = Conv3d(rng, sw, 2, 1, dtype=dtype)
        self.seg_head = Conv3d(rng, f + sw, 2, 1, dtype=dtype)

    def named_parameters(self):
        yield from self.stem.named_parameters("stem")
        for i, (block, down) in enumerate(zip(self.encoder_blocks, self.encoder_downs)):
            yield from block.named_parameters(f"encoder{i}.block")
            yield from down.named_parameters(f"encoder{i}.down")
        for i, block in enumerate(self.bottleneck):
            yield from block.named_parameters(f"bottleneck{i}")
        for i, (reduce, block) in enumerate(zip(self.decoder_reduces, self.decoder_blocks)):
            yield from reduce.named_parameters(f"decoder{i}.reduce")
            yield from block.named_parameters(f"decoder{i}.block")
        yield from self.fuse_block.named_parameters("boundary.fuse")
        for j, gate in enumerate(self.gates):
            yield from gate.named_parameters(f"boundary.gate{j}")
        yield from self.boundary_head.named_parameters("boundary.head")
        yield from self.seg_head.named_parameters("seg.head")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def forward(self, crop):
        s = self.config.input_size
        if crop.data.ndim != 5 or crop.data.shape[1] != 1 or crop.data.shape[2:] != (s, s, s):
            raise ContractViolation(
                f"forward: expected crop [N,1,{s},{s},{s}], got {crop.data.shape}")

        x = self.stem(crop)
        skips = []
        for block, down in zip(self.encoder_blocks, self.encoder_downs):
            feat = block(x)
            skips.append(feat)
            x = down(feat)
        for block in self.bottleneck:
            x = block(x)
        deepest = x

        d = deepest
        for reduce, block, skip in zip(self.decoder_reduces, self.decoder_blocks,
                                       reversed(skips)):
            d = ad.trilinear_upsample(reduce(d))
            d = block(ad.add(d, skip))

        stream = self.fuse_block(
            ad.concat_channels(ad.trilinear_upsample(deepest), skips[-1]))
        for j, gate in enumerate(self.gates):
            if j > 0:
                stream = ad.trilinear_upsample(stream)
            stream, _ = gate(skips[self.config.levels - 1 - j], stream)

        seg_probs = ad.sigmoid(self.seg_head(ad.concat_channels(d, stream)))
        boundary_probs = ad.sigmoid(self.boundary_head(stream))
        return ForwardOutputs(seg_probs=seg_probs, boundary_probs=boundary_probs)

    __call__ = forward


def build_network(config, rng_seed, dtype=np.float32):
    """Deterministically initialize a BoundaryAwareNet for the config."""
    return BoundaryAwareNet(config, rng_seed, dtype=dtype)


def _conv_params(out_ch, in_ch, kernel):
    return out_ch * in_ch * kernel ** 3 + out_ch


def _norm_params(channels):
    return 2 * channels


def _res_block_params(channels):
    return 2 * _norm_params(channels) + 2 * _conv_params(channels, channels, 3)


def parameter_count(config):
    """Scalar parameter count of build_network(config, seed), any seed.

    Computed arithmetically from the layer inventory rather than by
    building the network.
    """
    config.validate()
    widths = config.encoder_widths()
    levels = config.levels
    sw = config.stream_width()
    total = _conv_params(widths[0], 1, 3)
    for i in range(levels):
        total += _res_block_params(widths[i])
        total += _conv_params(widths[i + 1], widths[i], 3)
    total += config.bottleneck_blocks * _res_block_params(widths[levels])
    for i in range(levels):
        total += _conv_params(widths[i], widths[i + 1], 1)
        total += _res_block_params(widths[i])
    total += _res_block_params(sw)
    for j in range(levels):
        enc = widths[levels - 1 - j]
        inter = max(8, enc)
        total += _conv_params(inter, enc, 3)    # encoder projection
        total += _conv_params(inter, sw, 3)     # stream projection
        total += _conv_params(1, inter, 1)      # scoring conv
    total += _conv_params(2, sw, 1)
    total += _conv_params(2, widths[0] + sw, 1)
    return total
