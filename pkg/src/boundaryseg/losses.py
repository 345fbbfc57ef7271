"""Edge-aware training losses.

dice_loss(p, t)    = 1 - 2*sum(t*p) / (sum(t^2) + sum(p^2) + eps)
weighted_bce(p, e) = -beta * sum_{edge} log(p) - (1-beta) * sum_{non-edge} log(1-p)
                     with beta = (#non-edge voxels) / (#voxels)

The per-channel training loss is dice on the main stream plus dice and
weighted BCE on the boundary stream; the total is the average of the
foreground-channel and tumor-channel sums. Sums are not normalized to
means, so the BCE terms scale with voxel count while dice stays in
[0, 1]; the breakdown makes the relative magnitudes visible.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation

DICE_EPS = 1e-5
LOG_CLAMP = 1e-7


def _check_binary(name, t):
    d = t.data
    if not ((d == 0) | (d == 1)).all():
        raise ContractViolation(f"{name}: target values must be binary 0/1")


def _check_shapes(name, pred, target):
    if pred.data.shape != target.data.shape:
        raise ContractViolation(
            f"{name}: shape mismatch {pred.data.shape} vs {target.data.shape}")


def dice_loss(pred, target, eps=DICE_EPS):
    """Soft dice loss, differentiable in pred; target is binary."""
    _check_shapes("dice_loss", pred, target)
    _check_binary("dice_loss", target)
    intersection = ad.reduce_sum(ad.mul(target, pred))
    denom = ad.add(ad.reduce_sum(ad.mul(target, target)),
                   ad.reduce_sum(ad.mul(pred, pred)))
    return ad.sub(1.0, ad.div(ad.mul(intersection, 2.0), ad.add(denom, eps)))


def edge_beta(edge_target):
    """Fraction of non-edge voxels: (#zeros) / (#total)."""
    d = edge_target.data if isinstance(edge_target, Tensor) else np.asarray(edge_target)
    if d.size == 0:
        raise ContractViolation("edge_beta: empty edge target")
    if not ((d == 0) | (d == 1)).all():
        raise ContractViolation("edge_beta: target values must be binary 0/1")
    return float(np.count_nonzero(d == 0)) / d.size


def weighted_bce(pred, edge_target):
    """Class-balanced binary cross entropy over edge/non-edge voxels.

    Rare edges get the large weight beta (the non-edge fraction);
    predictions are clamped away from {0, 1} before the log.
    """
    _check_shapes("weighted_bce", pred, edge_target)
    _check_binary("weighted_bce", edge_target)
    beta = edge_beta(edge_target)
    one_minus = Tensor(1.0 - edge_target.data)
    edge_term = ad.reduce_sum(
        ad.mul(edge_target, ad.log(ad.clamp(pred, LOG_CLAMP, 1.0 - LOG_CLAMP))))
    non_edge_term = ad.reduce_sum(
        ad.mul(one_minus, ad.log(ad.clamp(ad.sub(1.0, pred), LOG_CLAMP, 1.0 - LOG_CLAMP))))
    return ad.sub(0.0, ad.add(ad.mul(edge_term, beta),
                              ad.mul(non_edge_term, 1.0 - beta)))


@dataclass
class LossBreakdown:
    """Detached per-term values of one total-loss evaluation."""

    dice_main_fg: float
    dice_main_tumor: float
    dice_boundary_fg: float
    dice_boundary_tumor: float
    bce_boundary_fg: float
    bce_boundary_tumor: float
    total: float

    FIELDS = ("dice_main_fg", "dice_main_tumor", "dice_boundary_fg",
              "dice_boundary_tumor", "bce_boundary_fg", "bce_boundary_tumor",
              "total")

    def as_row(self):
        return [getattr(self, f) for f in self.FIELDS]


def total_loss(outputs, seg_targets, edge_targets, eps=DICE_EPS):
    """Two-channel, two-stream composition.

    Per channel c (0 = foreground, 1 = tumor):
        L_c = dice(seg_probs_c, seg_targets_c)
            + dice(boundary_probs_c, edge_targets_c)
            + wBCE(boundary_probs_c, edge_targets_c)
    total = (L_fg + L_tumor) / 2.

    Returns (total as a scalar tensor, LossBreakdown of detached floats).
    """
    for name, t in (("seg_probs", outputs.seg_probs),
                    ("boundary_probs", outputs.boundary_probs),
                    ("seg_targets", seg_targets), ("edge_targets", edge_targets)):
        if t.data.ndim != 5 or t.data.shape[1] != 2:
            raise ContractViolation(
                f"total_loss: {name} must have 2 channels, got shape {t.data.shape}")

    per_channel = []
    terms = {}
    for c, tag in ((0, "fg"), (1, "tumor")):
        seg_p = ad.slice_channels(outputs.seg_probs, c, c + 1)
        bnd_p = ad.slice_channels(outputs.boundary_probs, c, c + 1)
        seg_t = ad.slice_channels(seg_targets, c, c + 1)
        edge_t = ad.slice_channels(edge_targets, c, c + 1)
        d_main = dice_loss(seg_p, seg_t, eps)
        d_bnd = dice_loss(bnd_p, edge_t, eps)
        bce = weighted_bce(bnd_p, edge_t)
        terms[f"dice_main_{tag}"] = d_main
        terms[f"dice_boundary_{tag}"] = d_bnd
        terms[f"bce_boundary_{tag}"] = bce
        per_channel.append(ad.add(ad.add(d_main, d_bnd), bce))
    total = ad.mul(ad.add(per_channel[0], per_channel[1]), 0.5)

    breakdown = LossBreakdown(
        dice_main_fg=terms["dice_main_fg"].item(),
        dice_main_tumor=terms["dice_main_tumor"].item(),
        dice_boundary_fg=terms["dice_boundary_fg"].item(),
        dice_boundary_tumor=terms["dice_boundary_tumor"].item(),
        bce_boundary_fg=terms["bce_boundary_fg"].item(),
        bce_boundary_tumor=terms["bce_boundary_tumor"].item(),
        total=total.item(),
    )
    return total, breakdown
