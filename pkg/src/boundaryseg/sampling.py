"""Boundary-target extraction and probabilistic training-crop sampling.

Crop centers follow the 0.8 / 0.1 / 0.1 law over (tumor, any foreground,
background) voxels; a missing class falls back tumor -> foreground ->
background so tumor-free volumes stay trainable. Volumes are zero-padded
by half the crop size per side, so every voxel is a valid center.

Edge ground truth is the 6-connectivity inner morphological gradient of
each class mask (foreground = labels in {1, 2}, tumor = labels == 2): a
voxel is an edge voxel iff it belongs to the mask and at least one of
its six face neighbors does not, with volume-border neighbors counting
as outside. Crop edge targets are sliced from the full-volume masks so
crop borders never fabricate edges.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ContractViolation
from .volumes import LabelVolume

SAMPLING_CLASSES = ("tumor", "foreground", "background")
CLASS_PROBS = (0.8, 0.1, 0.1)


def class_masks(labels):
    """(foreground, tumor) boolean masks from a label array."""
    arr = labels.labels if isinstance(labels, LabelVolume) else np.asarray(labels)
    return arr >= 1, arr == 2


def _inner_edges(mask):
    """Mask voxels with at least one of 6 face neighbors outside the mask."""
    inside_all = np.ones_like(mask)
    for axis in range(3):
        shifted = np.zeros_like(mask)
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        src[axis] = slice(1, None)
        dst[axis] = slice(None, -1)
        shifted[tuple(dst)] = mask[tuple(src)]
        inside_all &= shifted
        shifted = np.zeros_like(mask)
        src[axis] = slice(None, -1)
        dst[axis] = slice(1, None)
        shifted[tuple(dst)] = mask[tuple(src)]
        inside_all &= shifted
    return mask & ~inside_all


def extract_boundary_targets(labels):
    """Per-class edge masks, shape (2, nx, ny, nz) uint8.

    Channel 0: edges of the foreground mask, channel 1: edges of the
    tumor mask.
    """
    fg, tumor = class_masks(labels)
    return np.stack([_inner_edges(fg), _inner_edges(tumor)]).astype(np.uint8)


def seg_target_channels(labels):
    """Binary target channels (2, nx, ny, nz): foreground and tumor."""
    fg, tumor = class_masks(labels)
    return np.stack([fg, tumor]).astype(np.uint8)


@dataclass
class CropSample:
    """One training example: image crop plus binary targets.

    image:        Tensor [1, 1, S, S, S]
    seg_targets:  Tensor [1, 2, S, S, S] (foreground, tumor)
    edge_targets: Tensor [1, 2, S, S, S]
    sampling_class: class whose voxel the crop is centered on, after
        fallback resolution.
    """

    image: Tensor
    seg_targets: Tensor
    edge_targets: Tensor
    sampling_class: str
    center: tuple


def _draw_class(rng):
    u = rng.random()
    if u < CLASS_PROBS[0]:
        return "tumor"
    if u < CLASS_PROBS[0] + CLASS_PROBS[1]:
        return "foreground"
    return "background"


def _resolve_class(requested, index_pools):
    order = {"tumor": ("tumor", "foreground", "background"),
             "foreground": ("foreground", "background"),
             "background": ("background", "foreground")}[requested]
    for name in order:
        if index_pools[name].size:
            return name
    raise ContractViolation("crop sampling: label volume has no voxels")


def _index_pools(arr):
    flat = arr.reshape(-1)
    return {"tumor": np.flatnonzero(flat == 2),
            "foreground": np.flatnonzero(flat >= 1),
            "background": np.flatnonzero(flat == 0)}


def sample_training_crop(volume, labels, size, rng, edge_masks=None):
    """Draw one CropSample by the 0.8/0.1/0.1 class law.

    volume: normalized Volume; labels: matching LabelVolume; size: cubic
    crop edge; rng: numpy Generator (drives both the class draw and the
    center choice, so a fixed state reproduces the crop exactly).
    ``edge_masks`` may pass precomputed extract_boundary_targets output.
    """
    arr = labels.labels
    if volume.data.shape != arr.shape:
        raise ContractViolation(
            f"crop sampling: volume dims {volume.data.shape} != label dims {arr.shape}")
    pools = _index_pools(arr)
    requested = _draw_class(rng)
    actual = _resolve_class(requested, pools)
    pool = pools[actual]
    center_flat = int(pool[rng.integers(pool.size)])
    center = np.unravel_index(center_flat, arr.shape)

    if edge_masks is None:
        edge_masks = extract_boundary_targets(labels)
    seg_masks = seg_target_channels(labels)

    half = size // 2
    pad3 = ((half, half),) * 3
    img = np.pad(volume.data, pad3)
    seg = np.pad(seg_masks, ((0, 0),) + pad3)
    edge = np.pad(edge_masks, ((0, 0),) + pad3)
    x0, y0, z0 = center  # padded-array start index == original center index
    img_c = img[x0:x0 + size, y0:y0 + size, z0:z0 + size]
    seg_c = seg[:, x0:x0 + size, y0:y0 + size, z0:z0 + size]
    edge_c = edge[:, x0:x0 + size, y0:y0 + size, z0:z0 + size]

    return CropSample(
        image=Tensor(img_c[None, None].astype(np.float32)),
        seg_targets=Tensor(seg_c[None].astype(np.float32)),
        edge_targets=Tensor(edge_c[None].astype(np.float32)),
        sampling_class=actual,
        center=tuple(int(c) for c in center),
    )


class VolumeCropSampler:
    """Crop sampler over a fixed set of (Volume, LabelVolume) pairs.

    Pads volumes and precomputes target masks once; each sample picks a
    volume uniformly, then a crop by the class law.
    """

    def __init__(self, pairs, size):
        if not pairs:
            raise ContractViolation("sampler needs at least one volume")
        self.size = size
        self._cases = []
        half = size // 2
        pad3 = ((half, half),) * 3
        for vol, lab in pairs:
            if vol.data.shape != lab.labels.shape:
                raise ContractViolation("sampler: volume/label dims differ")
            self._cases.append({
                "pools": _index_pools(lab.labels),
                "shape": lab.labels.shape,
                "img": np.pad(vol.data, pad3),
                "seg": np.pad(seg_target_channels(lab), ((0, 0),) + pad3),
                "edge": np.pad(extract_boundary_targets(lab), ((0, 0),) + pad3),
            })

    def sample(self, rng):
        case = self._cases[rng.integers(len(self._cases))] if len(self._cases) > 1 \
            else self._cases[0]
        requested = _draw_class(rng)
        actual = _resolve_class(requested, case["pools"])
        pool = case["pools"][actual]
        center = np.unravel_index(int(pool[rng.integers(pool.size)]), case["shape"])
        s = self.size
        x0, y0, z0 = center
        return CropSample(
            image=Tensor(case["img"][x0:x0 + s, y0:y0 + s, z0:z0 + s][None, None]
                         .astype(np.float32)),
            seg_targets=Tensor(case["seg"][:, x0:x0 + s, y0:y0 + s, z0:z0 + s][None]
                               .astype(np.float32)),
            edge_targets=Tensor(case["edge"][:, x0:x0 + s, y0:y0 + s, z0:z0 + s][None]
                                .astype(np.float32)),
            sampling_class=actual,
            center=tuple(int(c) for c in center),
        )


class FixedCropSampler:
    """Returns the same crop every time (single-crop overfit runs)."""

    def __init__(self, crop):
        self.crop = crop

    def sample(self, rng):
        return self.crop


def full_volume_crop(volume, labels):
    """The whole (cubic) volume as one CropSample, no randomness."""
    arr = labels.labels
    if volume.data.shape != arr.shape:
        raise ContractViolation("full_volume_crop: volume/label dims differ")
    if len(set(arr.shape)) != 1:
        raise ContractViolation(f"full_volume_crop: volume must be cubic, got {arr.shape}")
    return CropSample(
        image=Tensor(volume.data[None, None].astype(np.float32)),
        seg_targets=Tensor(seg_target_channels(labels)[None].astype(np.float32)),
        edge_targets=Tensor(extract_boundary_targets(labels)[None].astype(np.float32)),
        sampling_class="foreground",
        center=tuple(s // 2 for s in arr.shape),
    )
