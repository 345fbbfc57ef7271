"""Physical-space volumes, intensity normalization, isotropic resampling
and the MVOL container format.

Arrays are indexed [x, y, z] with per-axis spacing in mm. The MVOL file
layout (little-endian) is:

    magic   8 bytes  b"MVOL0001"
    kind    u8       0 = intensity volume (float32 payload)
                     1 = label volume (uint8 payload)
    dims    3 x u32  (nx, ny, nz)
    spacing 3 x f64  (sx, sy, sz) mm
    payload          voxels in x-fastest order

Intensity and label files are paired as <stem>.img.mvol / <stem>.lbl.mvol.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (ContractViolation, MagicMismatchError,
                     PayloadSizeMismatchError, TruncatedVolumeError,
                     VolumeFormatError)

MAGIC = b"MVOL0001"
KIND_INTENSITY = 0
KIND_LABELS = 1
_HEADER = struct.Struct("<8sB3I3d")


@dataclass
class Volume:
    """Scalar intensity field; CT-like units before normalization,
    dimensionless in [-1, 1] after."""

    data: np.ndarray
    spacing_mm: tuple

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        _check_volume(self.data, self.spacing_mm)

    @property
    def dims(self):
        return self.data.shape


@dataclass
class LabelVolume:
    """Per-voxel class labels: 0 background, 1 kidney, 2 tumor."""

    labels: np.ndarray
    spacing_mm: tuple

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        _check_volume(self.labels, self.spacing_mm)
        if not np.isin(self.labels, (0, 1, 2)).all():
            raise ContractViolation("label volume contains values outside {0, 1, 2}")

    @property
    def dims(self):
        return self.labels.shape


def _check_volume(arr, spacing):
    if arr.ndim != 3:
        raise ContractViolation(f"volume must be 3-D, got shape {arr.shape}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ContractViolation(f"spacing must be 3 positive reals, got {spacing}")


def normalize_intensities(v):
    """Map CT-like intensities into [-1, 1]: divide by 1000 and clip.

    Idempotent: a volume whose values already lie inside [-1, 1] is
    treated as normalized and returned unchanged, so repeated
    normalization is safe anywhere in the pipeline.
    """
    if v.data.size and v.data.min() >= -1.0 and v.data.max() <= 1.0:
        return Volume(v.data.copy(), v.spacing_mm)
    out = np.clip(v.data / 1000.0, -1.0, 1.0).astype(np.float32)
    return Volume(out, v.spacing_mm)


def _resample_axis_linear(data, axis, new_n, old_n, scale):
    """1-D linear resample along ``axis``; pixel-center coordinates."""
    src = (np.arange(new_n) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, old_n - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, old_n - 1)
    w1 = (src - i0).astype(data.dtype)
    shape = [1] * data.ndim
    shape[axis] = new_n
    w1 = w1.reshape(shape)
    return np.take(data, i0, axis=axis) * (1 - w1) + np.take(data, i1, axis=axis) * w1


def _resample_axis_nearest(data, axis, new_n, old_n, scale):
    src = (np.arange(new_n) + 0.5) * scale - 0.5
    idx = np.clip(np.floor(src + 0.5).astype(np.int64), 0, old_n - 1)
    return np.take(data, idx, axis=axis)


def resample_isotropic(v, target_spacing=(1.0, 1.0, 1.0), mode=None, target_dims=None):
    """Resample to the target spacing: trilinear for intensities,
    nearest-neighbor for labels (labels are never interpolated).

    New dims per axis: round(old_dim * old_spacing / target_spacing).
    ``target_dims`` pins the output grid instead; the rounding formula
    is not exactly invertible, so restoring a volume's original grid
    after working at network resolution needs the dims stated.
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or any(s <= 0 for s in target):
        raise ContractViolation(f"target spacing must be 3 positive reals, got {target_spacing}")
    is_labels = isinstance(v, LabelVolume)
    if mode is None:
        mode = "nearest" if is_labels else "trilinear"
    if mode not in ("trilinear", "nearest"):
        raise ContractViolation(f"resample mode {mode!r} unknown")
    if is_labels and mode == "trilinear":
        raise ContractViolation("label volumes must be resampled with mode='nearest'")

    data = v.labels if is_labels else v.data
    spacing = v.spacing_mm
    if target == spacing and (target_dims is None or tuple(target_dims) == data.shape):
        out = data.copy()
        return LabelVolume(out, target) if is_labels else Volume(out, target)

    if target_dims is None:
        new_dims = tuple(max(1, int(round(data.shape[i] * spacing[i] / target[i])))
                         for i in range(3))
    else:
        new_dims = tuple(int(d) for d in target_dims)
        if len(new_dims) != 3 or min(new_dims) < 1:
            raise ContractViolation(f"target dims must be 3 positive ints, got {target_dims}")
    out = data.astype(np.float32) if mode == "trilinear" else data
    for axis in range(3):
        # output step measured in input-voxel units
        scale = target[axis] / spacing[axis]
        if mode == "trilinear":
            out = _resample_axis_linear(out, axis, new_dims[axis], data.shape[axis], scale)
        else:
            out = _resample_axis_nearest(out, axis, new_dims[axis], data.shape[axis], scale)
    return LabelVolume(out, target) if is_labels else Volume(out, target)


def write_volume(path, v):
    """Serialize a Volume or LabelVolume; bit-exact round trip."""
    if isinstance(v, LabelVolume):
        kind, payload = KIND_LABELS, v.labels
    elif isinstance(v, Volume):
        kind, payload = KIND_INTENSITY, v.data
    else:
        raise ContractViolation(f"write_volume: unsupported type {type(v).__name__}")
    header = _HEADER.pack(MAGIC, kind, *payload.shape, *v.spacing_mm)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes(order="F"))


def read_volume(path):
    """Parse an MVOL file into a Volume or LabelVolume."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        if raw[: len(MAGIC)] != MAGIC[: len(raw)]:
            raise MagicMismatchError(f"{path}: not an MVOL file")
        raise TruncatedVolumeError(f"{path}: header truncated at {len(raw)} bytes")
    magic, kind, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {magic!r}")
    if kind not in (KIND_INTENSITY, KIND_LABELS):
        raise VolumeFormatError(f"{path}: unknown payload kind {kind}")
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError(f"{path}: non-positive dims {(nx, ny, nz)}")
    if min(sx, sy, sz) <= 0:
        raise VolumeFormatError(f"{path}: non-positive spacing {(sx, sy, sz)}")
    dtype = np.float32 if kind == KIND_INTENSITY else np.uint8
    expected = nx * ny * nz * np.dtype(dtype).itemsize
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedVolumeError(
            f"{path}: payload is {len(payload)} bytes, header promises {expected}")
    if len(payload) > expected:
        raise PayloadSizeMismatchError(
            f"{path}: payload is {len(payload)} bytes, header promises {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape((nx, ny, nz), order="F")
    if kind == KIND_INTENSITY:
        return Volume(arr.copy(), (sx, sy, sz))
    return LabelVolume(arr.copy(), (sx, sy, sz))
