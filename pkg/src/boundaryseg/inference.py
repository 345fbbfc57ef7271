"""Whole-volume prediction with sliding windows, flip TTA and model
ensembling, plus label composition and the evaluation metrics.

Probabilities over a full volume come from tiling it with overlapping
cubic windows and averaging the per-window sigmoid outputs. TTA averages
predictions over involutive axis flips (the flip is undone on the output
before averaging); an ensemble averages the fields of several models.
A voxel's label is 2 where the tumor channel clears the threshold
(tumor overrides foreground), else 1 where the foreground channel does,
else 0.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, InvalidConfigError
from .volumes import LabelVolume, Volume, resample_isotropic

ALL_FLIPS = tuple(itertools.product((False, True), repeat=3))


@dataclass
class PredictionField:
    """Per-voxel 2-channel probabilities over a volume.

    probs: float32 array (2, nx, ny, nz); channel 0 = foreground,
    channel 1 = tumor. Provenance records how the field was produced.
    """

    probs: np.ndarray
    spacing_mm: tuple
    tta_used: bool = False
    ensemble_size: int = 1


@dataclass
class MetricsReport:
    kidneys_dice: float
    tumor_dice: float
    composite_dice: float


def _window_starts(extent, size, stride):
    if extent == size:
        return [0]
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return starts


def predict_volume(net, volume, crop_size=None, overlap=0.5):
    """Tile the volume with overlapping windows and average probabilities.

    The volume must already be normalized and resampled to the network's
    working spacing. Overlapping voxels take the mean of every covering
    window. Volumes smaller than the crop in any axis are a
    configuration error.
    """
    s = crop_size or net.config.input_size
    if s != net.config.input_size:
        raise InvalidConfigError(
            f"predict_volume: crop size {s} != network input size {net.config.input_size}")
    if not 0.0 <= overlap < 1.0:
        raise InvalidConfigError(f"predict_volume: overlap {overlap} outside [0, 1)")
    dims = volume.data.shape
    if min(dims) < s:
        raise InvalidConfigError(
            f"predict_volume: volume dims {dims} smaller than crop size {s}")

    stride = max(1, int(round(s * (1.0 - overlap))))
    starts = [_window_starts(d, s, stride) for d in dims]
    acc = np.zeros((2,) + dims, dtype=np.float64)
    cover = np.zeros(dims, dtype=np.float64)
    with ad.no_grad():
        for x0 in starts[0]:
            for y0 in starts[1]:
                for z0 in starts[2]:
                    crop = volume.data[x0:x0 + s, y0:y0 + s, z0:z0 + s]
                    out = net.forward(ad.Tensor(crop[None, None]))
                    probs = out.seg_probs.data[0]
                    acc[:, x0:x0 + s, y0:y0 + s, z0:z0 + s] += probs
                    cover[x0:x0 + s, y0:y0 + s, z0:z0 + s] += 1.0
    acc /= cover[None]
    return PredictionField(probs=acc.astype(np.float32), spacing_mm=volume.spacing_mm)


def _flip_axes(flips):
    return tuple(i for i, f in enumerate(flips) if f)


def tta_predict(net, volume, transforms=ALL_FLIPS, crop_size=None, overlap=0.5):
    """Mean over t of t^-1(predict(t(volume))) for axis-flip transforms.

    Each transform is a (flip_x, flip_y, flip_z) triple; flips are their
    own inverses. The identity-only set reproduces predict_volume
    exactly.
    """
    transforms = [tuple(bool(f) for f in t) for t in transforms]
    if not transforms:
        raise ContractViolation("tta_predict: transform set is empty")
    for t in transforms:
        if len(t) != 3:
            raise ContractViolation(f"tta_predict: transform {t!r} is not a 3-axis flip")

    acc = None
    for flips in transforms:
        axes = _flip_axes(flips)
        flipped = np.flip(volume.data, axes) if axes else volume.data
        field = predict_volume(net, Volume(flipped.copy(), volume.spacing_mm),
                               crop_size, overlap)
        probs = field.probs
        if axes:
            probs = np.flip(probs, tuple(a + 1 for a in axes))
        acc = probs.astype(np.float64) if acc is None else acc + probs
    mean = (acc / len(transforms)).astype(np.float32)
    return PredictionField(probs=mean, spacing_mm=volume.spacing_mm,
                           tta_used=len(transforms) > 1)


def ensemble_predict(nets, volume, tta=False, transforms=ALL_FLIPS,
                     crop_size=None, overlap=0.5):
    """Voxelwise mean of member predictions; members must share config."""
    if not nets:
        raise ContractViolation("ensemble_predict: no member networks")
    ref = nets[0].config
    for i, net in enumerate(nets[1:], start=1):
        if net.config != ref:
            raise ContractViolation(
                f"ensemble_predict: member {i} config {net.config} != member 0 config {ref}")
    acc = None
    for net in nets:
        if tta:
            field = tta_predict(net, volume, transforms, crop_size, overlap)
        else:
            field = predict_volume(net, volume, crop_size, overlap)
        acc = field.probs.astype(np.float64) if acc is None else acc + field.probs
    mean = (acc / len(nets)).astype(np.float32)
    return PredictionField(probs=mean, spacing_mm=volume.spacing_mm,
                           tta_used=tta, ensemble_size=len(nets))


def resample_prediction(field, target_spacing, target_dims=None):
    """Trilinearly resample the probability field to another spacing.

    Used to carry predictions made at the network's working resolution
    back to a volume's original spacing before thresholding;
    ``target_dims`` pins the exact original grid.
    """
    channels = [resample_isotropic(Volume(field.probs[c], field.spacing_mm),
                                   target_spacing, target_dims=target_dims)
                for c in range(2)]
    return PredictionField(probs=np.stack([c.data for c in channels]),
                           spacing_mm=channels[0].spacing_mm,
                           tta_used=field.tta_used,
                           ensemble_size=field.ensemble_size)


def compose_labels(field, threshold=0.5):
    """Probabilities to labels: tumor channel wins, then foreground."""
    if not 0.0 < threshold < 1.0:
        raise ContractViolation(f"compose_labels: threshold {threshold} outside (0, 1)")
    fg, tumor = field.probs[0], field.probs[1]
    labels = np.zeros(fg.shape, dtype=np.uint8)
    labels[fg >= threshold] = 1
    labels[tumor >= threshold] = 2
    return LabelVolume(labels, field.spacing_mm)


def dice_metric(pred, truth, mode):
    """Binary dice over the mode's mask.

    kidneys: both kidneys and tumor count as foreground (labels >= 1);
    tumor: everything except the tumor is background (labels == 2).
    Both masks empty -> 1.0; exactly one empty -> 0.0.
    """
    if pred.labels.shape != truth.labels.shape:
        raise ContractViolation(
            f"dice_metric: dims mismatch {pred.labels.shape} vs {truth.labels.shape}")
    if mode == "kidneys":
        a, b = pred.labels >= 1, truth.labels >= 1
    elif mode == "tumor":
        a, b = pred.labels == 2, truth.labels == 2
    else:
        raise ContractViolation(f"dice_metric: unknown mode {mode!r}")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def composite_dice(kidneys, tumor):
    """Arithmetic mean of kidneys dice and tumor dice."""
    if not (0.0 <= kidneys <= 1.0 and 0.0 <= tumor <= 1.0):
        raise ContractViolation("composite_dice: inputs must lie in [0, 1]")
    return (kidneys + tumor) / 2.0


def evaluate_labels(pred, truth):
    """Full MetricsReport for one case."""
    k = dice_metric(pred, truth, "kidneys")
    t = dice_metric(pred, truth, "tumor")
    return MetricsReport(kidneys_dice=k, tumor_dice=t, composite_dice=composite_dice(k, t))
