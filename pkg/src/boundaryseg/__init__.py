"""Boundary-aware 3-D volumetric segmentation, built on a from-scratch
reverse-mode autodiff tensor engine.

Subpackage map:
    autodiff   tensor engine: ops, tape, backward, finite-diff checking
    layers     residual blocks, group norm, attention gates
    network    the boundary-aware encoder-decoder
    losses     dice, class-balanced edge BCE, total-loss composition
    volumes    volumes, normalization, resampling, MVOL file format
    phantom    synthetic ground-truth phantom generation
    sampling   boundary targets and probabilistic crop sampling
    training   Adam, LR schedule, training loop, checkpoints
    inference  sliding-window prediction, TTA, ensembles, dice metrics
    gradcheck  the finite-difference verification suite
    render     slice images with label contours
    cli        command-line entry point
"""

from .autodiff import Tensor, backward, finite_diff_check, no_grad
from .inference import (PredictionField, MetricsReport, compose_labels,
                        composite_dice, dice_metric, ensemble_predict,
                        evaluate_labels, predict_volume, resample_prediction,
                        tta_predict)
from .losses import LossBreakdown, dice_loss, edge_beta, total_loss, weighted_bce
from .network import (BoundaryAwareNet, ForwardOutputs, NetworkConfig,
                      build_network, parameter_count)
from .phantom import PhantomSpec, generate_phantom
from .sampling import (CropSample, FixedCropSampler, VolumeCropSampler,
                       extract_boundary_targets, full_volume_crop,
                       sample_training_crop)
from .training import (AdamState, Checkpoint, TrainConfig, adam_step,
                       config_hash, load_checkpoint, lr_at, run_training,
                       save_checkpoint)
from .volumes import (LabelVolume, Volume, normalize_intensities, read_volume,
                      resample_isotropic, write_volume)

__version__ = "0.1.0"
