"""MAE-FUnet segmentation: fusion blocks, U-Net backbone, hybrid loss."""

from .losses import (
    DICE_EPS,
    FOCAL_ALPHA,
    FOCAL_GAMMA,
    LossWeights,
    dice_loss,
    focal_loss,
    hybrid_loss,
    one_hot,
    pixel_ce,
)
from .model import (
    STRATEGIES,
    FunetConfig,
    FunetModel,
    FusionBlock,
    MaeDirect,
    SegTrainer,
    fuse,
    funet_forward,
    mae_direct_forward,
    mae_grids,
    mae_token_grid,
    seg_train_step,
)

__all__ = [
    "DICE_EPS",
    "FOCAL_ALPHA",
    "FOCAL_GAMMA",
    "LossWeights",
    "dice_loss",
    "focal_loss",
    "hybrid_loss",
    "one_hot",
    "pixel_ce",
    "STRATEGIES",
    "FunetConfig",
    "FunetModel",
    "FusionBlock",
    "MaeDirect",
    "SegTrainer",
    "fuse",
    "funet_forward",
    "mae_direct_forward",
    "mae_grids",
    "mae_token_grid",
    "seg_train_step",
]
