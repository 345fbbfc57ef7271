"""Synthetic 3-D phantoms with exact geometric ground truth.

A phantom is one kidney-like ellipsoid containing (or intersected by)
one tumor-like sphere inside a noisy background. Labels come straight
from the geometry: 2 inside the tumor sphere, else 1 inside the kidney
ellipsoid, else 0. Intensity is background + per-class offset + Gaussian
noise, in CT-like units, so generated volumes run through the same
normalization as real data would.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import PhantomGeometryError
from .volumes import LabelVolume, Volume


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    kidney_center_mm: tuple = (16.0, 16.0, 16.0)
    kidney_axes_mm: tuple = (11.0, 9.0, 8.0)
    kidney_offset: float = 700.0
    tumor_center_mm: tuple = (20.0, 16.0, 16.0)
    tumor_radius_mm: float = 5.0
    tumor_offset: float = 1100.0
    background: float = -500.0
    noise_sigma: float = 30.0
    seed: int = 0

    @property
    def has_tumor(self):
        return self.tumor_radius_mm > 0

    @classmethod
    def desk_default(cls, seed=0):
        return cls(seed=seed)

    @classmethod
    def from_dict(cls, values):
        base = cls()
        kwargs = {}
        for key, raw in values.items():
            if not hasattr(base, key):
                raise PhantomGeometryError(f"phantom config: unknown key {key!r}")
            current = getattr(base, key)
            if isinstance(current, tuple):
                parts = [p for p in raw.replace(",", " ").split() if p]
                if len(parts) != 3:
                    raise PhantomGeometryError(
                        f"phantom config: {key} needs 3 values, got {raw!r}")
                caster = int if key == "dims" else float
                kwargs[key] = tuple(caster(p) for p in parts)
            elif isinstance(current, int) and not isinstance(current, bool):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)


def _voxel_centers_mm(spec):
    """Per-axis voxel center coordinates in mm."""
    return [(np.arange(spec.dims[i]) + 0.5) * spec.spacing_mm[i] for i in range(3)]


def _masks(spec):
    cx, cy, cz = _voxel_centers_mm(spec)
    gx = cx[:, None, None]
    gy = cy[None, :, None]
    gz = cz[None, None, :]
    kc, ka = spec.kidney_center_mm, spec.kidney_axes_mm
    kidney = (((gx - kc[0]) / ka[0]) ** 2
              + ((gy - kc[1]) / ka[1]) ** 2
              + ((gz - kc[2]) / ka[2]) ** 2) <= 1.0
    if spec.has_tumor:
        tc, r = spec.tumor_center_mm, spec.tumor_radius_mm
        tumor = ((gx - tc[0]) ** 2 + (gy - tc[1]) ** 2 + (gz - tc[2]) ** 2) <= r * r
    else:
        tumor = np.zeros(spec.dims, dtype=bool)
    return kidney, tumor


def _validate_geometry(spec, kidney, tumor):
    extents = [spec.dims[i] * spec.spacing_mm[i] for i in range(3)]
    for i in range(3):
        lo = spec.kidney_center_mm[i] - spec.kidney_axes_mm[i]
        hi = spec.kidney_center_mm[i] + spec.kidney_axes_mm[i]
        if lo < 0 or hi > extents[i]:
            raise PhantomGeometryError(
                f"kidney ellipsoid leaves the volume on axis {i} ([{lo}, {hi}] mm "
                f"vs extent {extents[i]} mm)")
    if spec.has_tumor:
        for i in range(3):
            lo = spec.tumor_center_mm[i] - spec.tumor_radius_mm
            hi = spec.tumor_center_mm[i] + spec.tumor_radius_mm
            if lo < 0 or hi > extents[i]:
                raise PhantomGeometryError(
                    f"tumor sphere leaves the volume on axis {i} ([{lo}, {hi}] mm "
                    f"vs extent {extents[i]} mm)")
        if not (kidney & tumor).any():
            raise PhantomGeometryError("tumor sphere does not intersect the kidney ellipsoid")
    if not kidney.any():
        raise PhantomGeometryError("kidney ellipsoid contains no voxel centers")


def generate_phantom(spec):
    """Deterministically generate the (Volume, LabelVolume) pair."""
    kidney, tumor = _masks(spec)
    _validate_geometry(spec, kidney, tumor)

    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[kidney] = 1
    labels[tumor] = 2

    rng = np.random.default_rng(spec.seed)
    intensity = np.full(spec.dims, spec.background, dtype=np.float64)
    intensity[labels == 1] += spec.kidney_offset
    intensity[labels == 2] += spec.tumor_offset
    if spec.noise_sigma > 0:
        intensity += rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    return (Volume(intensity.astype(np.float32), spec.spacing_mm),
            LabelVolume(labels, spec.spacing_mm))


def make_variant(spec, seed, max_tries=50):
    """Derive a geometry-jittered phantom for dataset generation.

    Centers move up to +-2 mm, semi-axes and the tumor radius scale by
    up to +-10%; the variant keeps its own noise seed. Draws are retried
    until the geometric invariants hold.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        k_center = tuple(c + rng.uniform(-2.0, 2.0) for c in spec.kidney_center_mm)
        k_axes = tuple(a * rng.uniform(0.9, 1.1) for a in spec.kidney_axes_mm)
        if spec.has_tumor:
            t_center = tuple(c + rng.uniform(-2.0, 2.0) for c in spec.tumor_center_mm)
            t_radius = spec.tumor_radius_mm * rng.uniform(0.9, 1.1)
        else:
            t_center, t_radius = spec.tumor_center_mm, 0.0
        candidate = replace(spec, kidney_center_mm=k_center, kidney_axes_mm=k_axes,
                            tumor_center_mm=t_center, tumor_radius_mm=t_radius,
                            seed=seed)
        try:
            _validate_geometry(candidate, *_masks(candidate))
        except PhantomGeometryError:
            continue
        return candidate
    return replace(spec, seed=seed)
