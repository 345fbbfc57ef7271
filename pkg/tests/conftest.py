"""Shared fixtures.

The overfit run (desk config, single phantom, 500 steps) is expensive,
so it executes once per session and is shared by the training-trend,
inference-quality and acceptance tests.
"""

import time

import pytest

import boundaryseg as bs
from boundaryseg import autodiff as ad
from boundaryseg.losses import total_loss
from boundaryseg.phantom import PhantomSpec, generate_phantom
from boundaryseg.sampling import full_volume_crop
from boundaryseg.training import AdamState, TrainConfig, adam_step, lr_at
from boundaryseg.volumes import normalize_intensities

OVERFIT_STEPS = 500


@pytest.fixture(scope="session")
def desk_phantom():
    spec = PhantomSpec.desk_default(seed=3)
    volume, labels = generate_phantom(spec)
    return normalize_intensities(volume), labels, spec


@pytest.fixture(scope="session")
def overfit_run(desk_phantom):
    """Overfit the desk network on one fixed 32^3 phantom crop.

    Returns the trained net, per-step totals, the phantom pair and the
    wall-clock time of the 500 optimization steps.
    """
    volume, labels, _ = desk_phantom
    crop = full_volume_crop(volume, labels)
    cfg = TrainConfig.desk_default()
    net = bs.build_network(bs.NetworkConfig.desk_default(), rng_seed=11)
    params = net.parameters()
    state = AdamState(params)

    totals = []
    start = time.perf_counter()
    for step in range(OVERFIT_STEPS):
        outputs = net.forward(crop.image)
        loss, breakdown = total_loss(outputs, crop.seg_targets, crop.edge_targets)
        ad.backward(loss)
        adam_step(params, [p.grad for p in params], state,
                  lr_at(step // cfg.steps_per_epoch, cfg))
        totals.append(breakdown.total)
    elapsed = time.perf_counter() - start
    return {"net": net, "totals": totals, "volume": volume, "labels": labels,
            "elapsed": elapsed}
