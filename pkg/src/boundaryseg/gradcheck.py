"""Finite-difference verification suite for every differentiable op and
the end-to-end network loss.

Each case builds a small randomized scalar graph in float64 and compares
tape gradients against central differences via
:func:`boundaryseg.autodiff.finite_diff_check`. The end-to-end case
pushes a total loss through an 8^3 single-level network and checks a
random subset of components per parameter tensor (full finite
differencing of every scalar would dominate the runtime without adding
coverage).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import AttentionGate, ResidualBlock
from .losses import dice_loss, total_loss, weighted_bce
from .network import NetworkConfig, ForwardOutputs, build_network

PASS_BOUND = 1e-4


def _randn(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True,
                  dtype=np.float64)


def _rand_unit(rng, shape, lo=0.1, hi=0.9):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True, dtype=np.float64)


def _rand_binary(rng, shape):
    mask = (rng.random(shape) < 0.4).astype(np.float64)
    if not mask.any():
        mask.reshape(-1)[0] = 1.0
    return Tensor(mask)


def case_reduce_sum_linear(rng):
    w = _randn(rng, (3, 3, 3))
    x = rng.standard_normal((3, 3, 3))

    def graph():
        return ad.reduce_sum(ad.mul(w, Tensor(x)))
    return graph, [w]


def case_conv3d_stride1(rng):
    x = _randn(rng, (1, 2, 5, 5, 5))
    w = _randn(rng, (3, 2, 3, 3, 3), scale=0.5)
    b = _randn(rng, (3,))

    def graph():
        return ad.reduce_sum(ad.sigmoid(ad.conv3d(x, w, b, stride=1, padding=1)))
    return graph, [x, w, b]


def case_conv3d_stride2(rng):
    x = _randn(rng, (1, 2, 6, 6, 6))
    w = _randn(rng, (4, 2, 3, 3, 3), scale=0.5)
    b = _randn(rng, (4,))

    def graph():
        return ad.reduce_sum(ad.sigmoid(ad.conv3d(x, w, b, stride=2, padding=1)))
    return graph, [x, w, b]


def case_trilinear_upsample(rng):
    x = _randn(rng, (1, 2, 3, 4, 2))
    w = rng.standard_normal((1, 2, 6, 8, 4))

    def graph():
        return ad.reduce_sum(ad.mul(ad.trilinear_upsample(x), Tensor(w)))
    return graph, [x]


def case_relu(rng):
    raw = rng.standard_normal((4, 4, 4))
    raw += 0.1 * np.sign(raw)  # keep samples off the kink
    x = Tensor(raw, requires_grad=True, dtype=np.float64)
    w = rng.standard_normal((4, 4, 4))

    def graph():
        return ad.reduce_sum(ad.mul(ad.relu(x), Tensor(w)))
    return graph, [x]


def case_sigmoid(rng):
    x = _randn(rng, (4, 4, 4), scale=2.0)
    w = rng.standard_normal((4, 4, 4))

    def graph():
        return ad.reduce_sum(ad.mul(ad.sigmoid(x), Tensor(w)))
    return graph, [x]


def case_arithmetic(rng):
    a = _randn(rng, (3, 3, 3))
    b = _rand_unit(rng, (3, 3, 3), 0.5, 1.5)

    def graph():
        s = ad.add(ad.mul(a, b), ad.sub(a, 0.5))
        return ad.reduce_sum(ad.div(s, ad.add(ad.mul(b, b), 1.0)))
    return graph, [a, b]


def case_concat_slice_expand(rng):
    a = _randn(rng, (1, 2, 3, 3, 3))
    m = _randn(rng, (1, 1, 3, 3, 3))
    w = rng.standard_normal((1, 3, 3, 3, 3))

    def graph():
        gated = ad.mul(ad.concat_channels(a, m), ad.expand_channels(m, 3))
        return ad.reduce_sum(ad.mul(ad.slice_channels(gated, 0, 3), Tensor(w)))
    return graph, [a, m]


def case_group_norm(rng):
    x = _randn(rng, (1, 8, 2, 2, 2))
    gain = _rand_unit(rng, (8,), 0.5, 1.5)
    bias = _randn(rng, (8,), scale=0.2)
    w = rng.standard_normal((1, 8, 2, 2, 2))

    def graph():
        return ad.reduce_sum(ad.mul(ad.group_norm(x, 4, gain, bias), Tensor(w)))
    return graph, [x, gain, bias]


def case_clamp_log(rng):
    x = _rand_unit(rng, (4, 4, 4), 0.1, 0.9)

    def graph():
        return ad.reduce_sum(ad.log(ad.clamp(x, 1e-7, 1 - 1e-7)))
    return graph, [x]


def case_dice_loss(rng):
    pred = _rand_unit(rng, (1, 1, 3, 3, 3))
    target = _rand_binary(rng, (1, 1, 3, 3, 3))

    def graph():
        return dice_loss(pred, target)
    return graph, [pred]


def case_weighted_bce(rng):
    pred = _rand_unit(rng, (1, 1, 3, 3, 3))
    target = _rand_binary(rng, (1, 1, 3, 3, 3))

    def graph():
        return weighted_bce(pred, target)
    return graph, [pred]


def case_total_loss(rng):
    seg_p = _rand_unit(rng, (1, 2, 2, 2, 2))
    bnd_p = _rand_unit(rng, (1, 2, 2, 2, 2))
    seg_t = _rand_binary(rng, (1, 2, 2, 2, 2))
    edge_t = _rand_binary(rng, (1, 2, 2, 2, 2))

    def graph():
        out = ForwardOutputs(seg_probs=seg_p, boundary_probs=bnd_p)
        return total_loss(out, seg_t, edge_t)[0]
    return graph, [seg_p, bnd_p]


def case_residual_block(rng):
    block = ResidualBlock(rng, 4, dtype=np.float64)
    x = _randn(rng, (1, 4, 4, 4, 4))
    w = rng.standard_normal((1, 4, 4, 4, 4))

    def graph():
        return ad.reduce_sum(ad.mul(block(x), Tensor(w)))
    return graph, [x] + [t for _, t in block.named_parameters("block")]


def case_attention_gate(rng):
    gate = AttentionGate(rng, 2, 3, dtype=np.float64)
    enc = _randn(rng, (1, 2, 4, 4, 4))
    stream = _randn(rng, (1, 3, 4, 4, 4))
    w = rng.standard_normal((1, 3, 4, 4, 4))

    def graph():
        gated, _ = gate(enc, stream)
        return ad.reduce_sum(ad.mul(gated, Tensor(w)))
    return graph, [enc, stream] + [t for _, t in gate.named_parameters("gate")]


def case_end_to_end(rng):
    config = NetworkConfig(input_size=8, base_filters=2, levels=1, bottleneck_blocks=1)
    net = build_network(config, rng_seed=int(rng.integers(2 ** 31)), dtype=np.float64)
    crop = Tensor(rng.standard_normal((1, 1, 8, 8, 8)), dtype=np.float64)
    seg_t = _rand_binary(rng, (1, 2, 8, 8, 8))
    edge_t = _rand_binary(rng, (1, 2, 8, 8, 8))

    def graph():
        return total_loss(net.forward(crop), seg_t, edge_t)[0]
    return graph, net.parameters()


OP_CASES = [
    ("reduce_sum_linear", case_reduce_sum_linear),
    ("conv3d_stride1", case_conv3d_stride1),
    ("conv3d_stride2", case_conv3d_stride2),
    ("trilinear_upsample", case_trilinear_upsample),
    ("relu", case_relu),
    ("sigmoid", case_sigmoid),
    ("arithmetic", case_arithmetic),
    ("concat_slice_expand", case_concat_slice_expand),
    ("group_norm", case_group_norm),
    ("clamp_log", case_clamp_log),
    ("dice_loss", case_dice_loss),
    ("weighted_bce", case_weighted_bce),
    ("total_loss", case_total_loss),
    ("residual_block", case_residual_block),
    ("attention_gate", case_attention_gate),
]


@dataclass
class CaseResult:
    name: str
    seed: int
    error: float

    @property
    def passed(self):
        return self.error < PASS_BOUND


def run_case(name, builder, seed, eps=1e-5, max_components=None):
    rng = np.random.default_rng(seed)
    graph, inputs = builder(rng)
    err = ad.finite_diff_check(graph, inputs, eps=eps,
                               max_components=max_components,
                               rng=np.random.default_rng(seed + 1))
    return CaseResult(name=name, seed=seed, error=err)


def run_gradient_suite(seeds=20, include_end_to_end=True, e2e_components=4,
                       eps=1e-5):
    """Run every case over ``seeds`` random seeds; returns CaseResults.

    The worst error over all results is the suite verdict; the pass
    bound is 1e-4 relative at 64-bit precision.
    """
    seed_list = range(seeds) if isinstance(seeds, int) else list(seeds)
    results = []
    for seed in seed_list:
        for name, builder in OP_CASES:
            results.append(run_case(name, builder, seed, eps=eps))
        if include_end_to_end:
            results.append(run_case("end_to_end", case_end_to_end, seed,
                                    eps=eps, max_components=e2e_components))
    return results


def worst_error(results):
    return max(r.error for r in results)
