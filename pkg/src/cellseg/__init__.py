"""Outlier-aware binary cell segmentation.

Trains a small convolutional segmenter whose objective mixes Dice and
cross entropy with an uncertainty term driven by virtual outliers: logit
vectors sampled from the low-density tails of class-conditional Gaussians
fitted online over the network's own per-pixel predictions.
"""

from .estimator import OutlierAwareSegmenter
from .imaging import (
    generate_synthetic_dataset,
    load_image,
    load_mask,
    save_image,
    save_mask,
    save_overlay,
    SynthConfig,
)
from .losses import ce_loss, combine, dice_loss, LossReport, LossSpec, seg_loss, uncertainty_loss
from .metrics import aggregate, confusion, dsc, EvalReport, hausdorff, hd95, iou
from .outliers import (
    build_synthetic_map,
    ClassQueue,
    density,
    enqueue_pixels,
    estimate,
    GaussianModel,
    OutlierBatch,
    sample_outliers,
)
from .segmenter import (
    forward,
    init_params,
    load_checkpoint,
    loss_and_grad,
    lr_at,
    OptimHyper,
    OptimState,
    save_checkpoint,
    SegmenterParams,
    sgd_step,
)
from .tiling import extract_patches, plan_tiles, prune_maskless, split_dataset, stitch, TilePlan, TileRect
from .trainer import evaluate, infer, RunLog, train, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "OutlierAwareSegmenter",
    "SynthConfig",
    "generate_synthetic_dataset",
    "load_image",
    "load_mask",
    "save_image",
    "save_mask",
    "save_overlay",
    "LossSpec",
    "LossReport",
    "ce_loss",
    "dice_loss",
    "seg_loss",
    "uncertainty_loss",
    "combine",
    "EvalReport",
    "aggregate",
    "confusion",
    "dsc",
    "iou",
    "hd95",
    "hausdorff",
    "ClassQueue",
    "GaussianModel",
    "OutlierBatch",
    "enqueue_pixels",
    "estimate",
    "density",
    "sample_outliers",
    "build_synthetic_map",
    "SegmenterParams",
    "OptimState",
    "OptimHyper",
    "forward",
    "init_params",
    "loss_and_grad",
    "sgd_step",
    "lr_at",
    "save_checkpoint",
    "load_checkpoint",
    "TileRect",
    "TilePlan",
    "plan_tiles",
    "extract_patches",
    "prune_maskless",
    "split_dataset",
    "stitch",
    "TrainConfig",
    "RunLog",
    "train",
    "evaluate",
    "infer",
]
