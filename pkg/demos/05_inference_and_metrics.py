"""Whole-volume inference: sliding windows, flip TTA, ensembling, label
composition, dice metrics and slice rendering.

Run:  python3 demos/05_inference_and_metrics.py   (writes demos/out/05/)
"""

from pathlib import Path

import numpy as np

from boundaryseg.inference import (ALL_FLIPS, compose_labels, ensemble_predict,
                                   evaluate_labels, predict_volume, tta_predict)
from boundaryseg.network import NetworkConfig, build_network
from boundaryseg.phantom import PhantomSpec, generate_phantom
from boundaryseg.render import render_slice, write_ppm
from boundaryseg.volumes import normalize_intensities, write_volume

out_dir = Path(__file__).parent / "out" / "05"
out_dir.mkdir(parents=True, exist_ok=True)

spec = PhantomSpec(dims=(24, 24, 24), kidney_center_mm=(12, 12, 12),
                   kidney_axes_mm=(8, 7, 6), tumor_center_mm=(15, 12, 12),
                   tumor_radius_mm=3.5, seed=5)
volume, labels = generate_phantom(spec)
volume = normalize_intensities(volume)

cfg = NetworkConfig(input_size=16, base_filters=2, levels=2, bottleneck_blocks=1)
nets = [build_network(cfg, rng_seed=s) for s in (1, 2, 3)]

# Sliding-window prediction tiles the volume; overlaps are averaged.
field = predict_volume(nets[0], volume, overlap=0.5)
print("single model field:", field.probs.shape, "tta:", field.tta_used)

# TTA: mean over involutive axis flips of unflipped predictions.
tta_field = tta_predict(nets[0], volume, transforms=ALL_FLIPS)
print("TTA over", len(ALL_FLIPS), "flips; mean |delta| vs plain:",
      float(np.abs(tta_field.probs - field.probs).mean()))

# Ensembling: voxelwise mean over members (untrained nets here, so the
# numbers only demonstrate the machinery, not segmentation quality).
ens = ensemble_predict(nets, volume, tta=False)
print("ensemble of", ens.ensemble_size, "models")

# Probabilities -> labels: tumor channel wins, then foreground.
pred = compose_labels(ens, threshold=0.5)
write_volume(out_dir / "prediction.lbl.mvol", pred)

# The three challenge metrics.
report = evaluate_labels(pred, labels)
print(f"kidneys dice {report.kidneys_dice:.4f} | tumor dice {report.tumor_dice:.4f} "
      f"| composite {report.composite_dice:.4f}")

# Slice render with ground-truth contours (kidney red, tumor green).
rgb = render_slice(volume, labels, axis="z", index=12)
write_ppm(out_dir / "slice_z12.ppm", rgb)
print("artifacts in", out_dir)
