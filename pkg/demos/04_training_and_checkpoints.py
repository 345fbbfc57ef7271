"""A short training run with the full loop: sampling, Adam with polynomial
LR decay, CSV logging, per-epoch checkpoints and bit-exact resume.

Run:  python3 demos/04_training_and_checkpoints.py   (writes demos/out/04/)
Takes around a minute; the full overfit study lives in the acceptance suite.
"""

import shutil
from pathlib import Path

import numpy as np

from boundaryseg.network import NetworkConfig, build_network
from boundaryseg.phantom import PhantomSpec, generate_phantom
from boundaryseg.sampling import VolumeCropSampler
from boundaryseg.training import TrainConfig, lr_at, run_training
from boundaryseg.volumes import normalize_intensities

out_dir = Path(__file__).parent / "out" / "04"
shutil.rmtree(out_dir, ignore_errors=True)
out_dir.mkdir(parents=True)

# Small everything: 16^3 crops over a 24^3 phantom, 3 epochs x 20 steps.
net_cfg = NetworkConfig(input_size=16, base_filters=2, levels=2, bottleneck_blocks=1)
cfg = TrainConfig(alpha0=2e-3, total_epochs=3, steps_per_epoch=20, seed=0)
print("LR schedule alpha0*(1-e/N)^0.9:",
      [round(lr_at(e, cfg), 6) for e in range(cfg.total_epochs + 1)])

spec = PhantomSpec(dims=(24, 24, 24), kidney_center_mm=(12, 12, 12),
                   kidney_axes_mm=(8, 7, 6), tumor_center_mm=(15, 12, 12),
                   tumor_radius_mm=3.5, seed=2)
volume, labels = generate_phantom(spec)
sampler = VolumeCropSampler([(normalize_intensities(volume), labels)],
                            size=net_cfg.input_size)

net = build_network(net_cfg, rng_seed=cfg.seed)
ckpt, log_path = run_training(cfg, net, sampler, checkpoint_dir=out_dir / "run")
rows = log_path.read_text().strip().splitlines()
first_total = float(rows[1].split(",")[-1])
last_total = float(rows[-1].split(",")[-1])
print(f"trained {ckpt.step} steps; total loss {first_total:.1f} -> {last_total:.1f}")
print("checkpoints:", sorted(p.name for p in (out_dir / "run").glob("*.mckp")))

# Resume from the epoch-1 checkpoint: the continuation reproduces the
# uninterrupted run bit for bit.
net_b = build_network(net_cfg, rng_seed=cfg.seed)
final_b, _ = run_training(cfg, net_b, sampler, checkpoint_dir=out_dir / "resumed",
                          resume_from=out_dir / "run" / "ckpt_epoch_0001.mckp")
identical = all(np.array_equal(ckpt.params[name], final_b.params[name])
                for name in ckpt.params)
print("resume reproduces the uninterrupted run bitwise:", identical)
