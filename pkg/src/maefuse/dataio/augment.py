"""Random rotation, flips and crops applied jointly to a slice and its masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import ContractError
from .preprocess import resize_bilinear_2d, resize_nearest_2d
from .records import SliceRecord, with_image


@dataclass(frozen=True)
class AugmentPolicy:
    rotation_max_deg: float = 15.0
    flip_prob: float = 0.5
    crop_scale_range: tuple[float, float] = (0.8, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ContractError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ContractError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        if self.rotation_max_deg < 0:
            raise ContractError("rotation_max_deg must be non-negative")


IDENTITY = AugmentPolicy(0.0, 0.0, (1.0, 1.0))


def augment(s: SliceRecord, policy: AugmentPolicy, rng: np.random.Generator) -> SliceRecord:
    """Rotate, flip horizontally, flip vertically, then crop-and-resize.

    Exactly six values are drawn from ``rng`` per call regardless of the
    policy, so streams stay aligned across policies. The image uses
    bilinear resampling with zero fill; masks use nearest neighbour.
    """
    angle, u_h, u_v, scale_u, u_top, u_left = rng.random(6)
    angle = (2.0 * angle - 1.0) * policy.rotation_max_deg
    lo, hi = policy.crop_scale_range
    scale = lo + (hi - lo) * scale_u

    image = s.image
    masks = [m for m in (s.seg_mask, s.brain_mask)]

    if angle != 0.0:
        image = ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0.0)
        masks = [None if m is None else ndimage.rotate(m, angle, reshape=False, order=0, mode="constant", cval=0) for m in masks]
    if u_h < policy.flip_prob:
        image = image[:, ::-1]
        masks = [None if m is None else m[:, ::-1] for m in masks]
    if u_v < policy.flip_prob:
        image = image[::-1, :]
        masks = [None if m is None else m[::-1, :] for m in masks]

    size = image.shape[0]
    side = max(1, min(size, int(np.floor(scale * size + 0.5))))
    if side < size:
        span = size - side
        top = min(span, int(u_top * (span + 1)))
        left = min(span, int(u_left * (span + 1)))
        image = resize_bilinear_2d(image[top : top + side, left : left + side], size, size)
        masks = [None if m is None else resize_nearest_2d(m[top : top + side, left : left + side], size, size) for m in masks]

    if image is s.image:
        return s
    image = np.clip(np.ascontiguousarray(image, dtype=np.float32), 0.0, 1.0)
    seg, brain = (None if m is None else np.ascontiguousarray(m) for m in masks)
    return with_image(s, image, seg_mask=seg, brain_mask=brain)
