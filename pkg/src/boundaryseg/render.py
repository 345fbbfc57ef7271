"""Grayscale slice rendering with label contour overlays.

Slices are written as binary portable pixmaps (P6 .ppm, or P5 .pgm when
no labels are given): dependency-free, viewable everywhere. Kidney
contours draw red, tumor contours green.
"""

import numpy as np

from .errors import ContractViolation

AXES = {"x": 0, "y": 1, "z": 2}
KIDNEY_RGB = (220, 40, 40)
TUMOR_RGB = (40, 220, 40)


def _slice3d(arr, axis, index):
    if axis not in AXES:
        raise ContractViolation(f"render: axis must be one of x/y/z, got {axis!r}")
    ax = AXES[axis]
    if not 0 <= index < arr.shape[ax]:
        raise ContractViolation(
            f"render: index {index} outside [0, {arr.shape[ax]}) on axis {axis}")
    return np.take(arr, index, axis=ax)


def _to_gray(slice2d):
    # normalized intensities live in [-1, 1]
    g = np.clip((slice2d.astype(np.float32) + 1.0) * 0.5, 0.0, 1.0)
    return (g * 255.0 + 0.5).astype(np.uint8)


def _contour(mask):
    """4-neighbor inner boundary of a 2-D boolean mask."""
    inside = np.ones_like(mask)
    for axis in range(2):
        for direction in (1, -1):
            shifted = np.zeros_like(mask)
            src = [slice(None)] * 2
            dst = [slice(None)] * 2
            if direction == 1:
                src[axis], dst[axis] = slice(1, None), slice(None, -1)
            else:
                src[axis], dst[axis] = slice(None, -1), slice(1, None)
            shifted[tuple(dst)] = mask[tuple(src)]
            inside &= shifted
    return mask & ~inside


def render_slice(volume, labels, axis, index):
    """RGB uint8 image (H, W, 3) of one slice, contours overlaid."""
    gray = _to_gray(_slice3d(volume.data, axis, index))
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    if labels is not None:
        if labels.labels.shape != volume.data.shape:
            raise ContractViolation("render: label dims do not match volume dims")
        lab = _slice3d(labels.labels, axis, index)
        for value, color in ((1, KIDNEY_RGB), (2, TUMOR_RGB)):
            edge = _contour(lab == value)
            rgb[edge] = color
    return rgb


def write_ppm(path, rgb):
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def write_pgm(path, gray):
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())
