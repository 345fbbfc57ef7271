"""The boundary-aware network and its edge-aware losses.

Run:  python3 demos/03_network_and_losses.py
"""

from boundaryseg.losses import total_loss
from boundaryseg.network import NetworkConfig, build_network, parameter_count
from boundaryseg.phantom import PhantomSpec, generate_phantom
from boundaryseg.sampling import full_volume_crop
from boundaryseg.volumes import normalize_intensities

# Desk-scale config: 32^3 crops, 4 stem filters, 2 downsampling levels.
# The paper-scale preset (176^3, 16 filters, 4 levels) is a config away.
cfg = NetworkConfig.desk_default()
print("desk config:", cfg)
print("encoder widths double per level:", cfg.encoder_widths())
print("parameter count (closed form):", parameter_count(cfg))
print("paper preset parameter count:", parameter_count(NetworkConfig.paper_preset()))

net = build_network(cfg, rng_seed=11)
walked = sum(p.size for p in net.parameters())
assert walked == parameter_count(cfg)

# Forward pass: main stream and boundary stream, each 2 sigmoid channels
# (channel 0 = kidneys+tumor foreground, channel 1 = tumor only).
volume, labels = generate_phantom(PhantomSpec.desk_default(seed=3))
crop = full_volume_crop(normalize_intensities(volume), labels)
outputs = net.forward(crop.image)
print("seg_probs:", outputs.seg_probs.shape,
      "| boundary_probs:", outputs.boundary_probs.shape)

# The total loss: per channel, dice on the main stream plus dice and
# class-balanced BCE on the boundary stream, averaged over the two channels.
# BCE terms are voxel sums, so they dominate the raw magnitude; the
# breakdown keeps every term visible.
total, br = total_loss(outputs, crop.seg_targets, crop.edge_targets)
print(f"total loss at init: {total.item():.2f}")
print(f"  dice main      fg {br.dice_main_fg:.4f}   tumor {br.dice_main_tumor:.4f}")
print(f"  dice boundary  fg {br.dice_boundary_fg:.4f}   tumor {br.dice_boundary_tumor:.4f}")
print(f"  wBCE boundary  fg {br.bce_boundary_fg:.1f}    tumor {br.bce_boundary_tumor:.1f}")
