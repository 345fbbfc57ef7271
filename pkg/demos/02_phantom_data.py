"""Data pipeline walkthrough: phantoms, normalization, resampling, crops,
boundary targets and the MVOL container.

Run:  python3 demos/02_phantom_data.py          (writes demos/out/02/)
"""

from pathlib import Path

import numpy as np

from boundaryseg.phantom import PhantomSpec, generate_phantom
from boundaryseg.sampling import (VolumeCropSampler, extract_boundary_targets,
                                  sample_training_crop)
from boundaryseg.volumes import (normalize_intensities, read_volume,
                                 resample_isotropic, write_volume)

out_dir = Path(__file__).parent / "out" / "02"
out_dir.mkdir(parents=True, exist_ok=True)

# A phantom is an ellipsoidal "kidney" with an intersecting spherical
# "tumor" in CT-like units, plus Gaussian noise; labels come from geometry.
spec = PhantomSpec.desk_default(seed=7)
volume, labels = generate_phantom(spec)
print("phantom dims:", volume.dims, "| label counts:",
      {int(k): int(v) for k, v in zip(*np.unique(labels.labels, return_counts=True))})

# Intensity normalization: divide by 1000, clip to [-1, 1]; idempotent.
norm = normalize_intensities(volume)
print("intensity range raw [%.0f, %.0f] -> normalized [%.3f, %.3f]"
      % (volume.data.min(), volume.data.max(), norm.data.min(), norm.data.max()))

# Resampling: trilinear for intensities, nearest for labels (never blended).
coarse = resample_isotropic(norm, (2.0, 2.0, 2.0))
coarse_lab = resample_isotropic(labels, (2.0, 2.0, 2.0))
print("resampled to 2 mm:", norm.dims, "->", coarse.dims,
      "| label values still", sorted(int(v) for v in np.unique(coarse_lab.labels)))

# Boundary ground truth: a voxel is an edge iff it is in the class mask and
# one of its 6 face neighbors is not (volume borders count as outside).
edges = extract_boundary_targets(labels)
print("edge voxels: foreground %d, tumor %d"
      % (int(edges[0].sum()), int(edges[1].sum())))

# Training crops follow the 0.8/0.1/0.1 (tumor/foreground/background) law.
rng = np.random.default_rng(0)
crop = sample_training_crop(norm, labels, size=16, rng=rng)
print("one crop:", crop.image.shape, "centered on a", crop.sampling_class, "voxel")

sampler = VolumeCropSampler([(norm, labels)], size=16)
rng = np.random.default_rng(1)
draws = [sampler.sample(rng).sampling_class for _ in range(2000)]
freqs = {c: draws.count(c) / len(draws) for c in ("tumor", "foreground", "background")}
print("empirical class law over 2000 draws:", freqs)

# MVOL round trips are bit-exact.
img_path = out_dir / "phantom.img.mvol"
lbl_path = out_dir / "phantom.lbl.mvol"
write_volume(img_path, norm)
write_volume(lbl_path, labels)
back = read_volume(img_path)
assert np.array_equal(back.data, norm.data)
print("MVOL round trip bit-exact; files at", out_dir)
