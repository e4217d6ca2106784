"""Soft Dice, focal and pixel cross-entropy losses and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError
from ..nnkit import functional as F
from ..nnkit.tensor import Tensor, clip, log

DICE_EPS = 1e-5
PROB_FLOOR = 1e-8
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) integer labels -> (N, C, H, W) indicator."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(f"labels must lie in [0, {num_classes})")
    eye = np.eye(num_classes, dtype=dtype)
    return np.moveaxis(eye[labels], -1, 1)


def dice_loss(probs: Tensor, onehot, eps: float = DICE_EPS) -> Tensor:
    """Per-sample soft Dice over every class, background included.

    For each sample and class: ``1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps)``;
    the result is averaged over classes, then over samples.
    """
    g = np.asarray(onehot, dtype=probs.dtype)
    if g.shape != probs.shape:
        raise ContractError(f"one-hot shape {g.shape} != probability shape {probs.shape}")
    gt = Tensor(g)
    axes = tuple(range(2, probs.ndim))
    inter = (probs * gt).sum(axis=axes)
    denom = (probs * probs).sum(axis=axes) + Tensor(np.asarray((g * g).sum(axis=axes) + eps, dtype=probs.dtype))
    score = (inter * 2.0 + eps) / denom
    return (1.0 - score).mean()


def true_class_prob(probs: Tensor, target) -> Tensor:
    """Probability assigned to each pixel's true class, clamped below at 1e-8."""
    g = one_hot(target, probs.shape[1], dtype=probs.dtype)
    return clip((probs * Tensor(g)).sum(axis=1), PROB_FLOOR, None)


def focal_loss(probs: Tensor, target, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA) -> Tensor:
    """Mean over pixels of ``-alpha * (1 - p_t)^gamma * log(p_t)``."""
    pt = true_class_prob(probs, target)
    nll = -log(pt)
    if gamma == 0:
        return nll.mean() * alpha
    return ((1.0 - pt) ** gamma * nll).mean() * alpha


def pixel_ce(probs: Tensor, target) -> Tensor:
    """Mean over pixels of ``-log p_t``."""
    return (-log(true_class_prob(probs, target))).mean()


@dataclass(frozen=True)
class LossWeights:
    dice: float = 1.0
    focal: float = 1.0
    ce: float = 1.0

    def __post_init__(self):
        if min(self.dice, self.focal, self.ce) < 0:
            raise ContractError("loss weights must be non-negative")


def hybrid_loss(
    logits: Tensor,
    target,
    weights: LossWeights = LossWeights(),
    gamma: float = FOCAL_GAMMA,
    alpha: float = FOCAL_ALPHA,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted Dice + focal + CE from one shared softmax over classes.

    Returns the total as a tensor and the unweighted component values.
    """
    target = np.asarray(target)
    probs = F.softmax(logits, axis=1)
    l_dice = dice_loss(probs, one_hot(target, logits.shape[1], dtype=logits.dtype))
    l_focal = focal_loss(probs, target, gamma, alpha)
    l_ce = pixel_ce(probs, target)
    total = l_dice * weights.dice + l_focal * weights.focal + l_ce * weights.ce
    parts = {"dice": float(l_dice.data), "focal": float(l_focal.data), "ce": float(l_ce.data)}
    return total, parts
