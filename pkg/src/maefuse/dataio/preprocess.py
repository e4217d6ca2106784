"""Slice preprocessing: percentile clamp, min-max normalization, letterbox resize."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from ..nnkit.functional import bilinear_matrix

IMAGE_SIZE = 224
LOW_PCT = 0.1
HIGH_PCT = 99.9


def clamp_bounds(values: np.ndarray, low: float = LOW_PCT, high: float = HIGH_PCT) -> tuple[float, float]:
    """Percentiles by linear interpolation between order statistics."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = np.percentile(values, [low, high], method="linear")
    return float(lo), float(hi)


def letterbox_shape(h: int, w: int, size: int) -> tuple[int, int]:
    """Shape after scaling the longer side to ``size``, aspect preserved."""
    longer = max(h, w)
    nh = max(1, int(np.floor(h * size / longer + 0.5)))
    nw = max(1, int(np.floor(w * size / longer + 0.5)))
    return nh, nw


def _pad_to(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape
    top = (size - h) // 2
    left = (size - w) // 2
    out = np.zeros((size, size), dtype=arr.dtype)
    out[top : top + h, left : left + w] = arr
    return out


def resize_bilinear_2d(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr
    ry = bilinear_matrix(h, out_h)
    rx = bilinear_matrix(w, out_w)
    return ry @ arr @ rx.T


def resize_nearest_2d(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr
    iy = np.minimum(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    ix = np.minimum(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return arr[np.ix_(iy, ix)]


def preprocess_slice(raw: np.ndarray, size: int = IMAGE_SIZE, bounds: tuple[float, float] | None = None) -> np.ndarray:
    """Clamp to the 0.1/99.9 percentiles, scale to [0, 1], letterbox to size x size.

    ``bounds`` overrides the per-slice percentiles (per-volume mode). A
    slice with zero intensity range maps to all zeros.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.size == 0:
        raise ContractError(f"preprocess_slice needs a non-empty 2D array, got shape {raw.shape}")
    lo, hi = clamp_bounds(raw) if bounds is None else bounds
    x = np.clip(raw, lo, hi)
    span = hi - lo
    if span > 0:
        x = (x - lo) / span
    else:
        x = np.zeros_like(x)
    nh, nw = letterbox_shape(*x.shape, size)
    x = resize_bilinear_2d(x, nh, nw)
    x = np.clip(x, 0.0, 1.0)
    return _pad_to(x, size).astype(np.float32)


def preprocess_mask(mask: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Apply the slice letterbox geometry to a label map with nearest neighbour."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise ContractError(f"preprocess_mask needs a non-empty 2D array, got shape {mask.shape}")
    labels = np.rint(mask).astype(np.int64)
    nh, nw = letterbox_shape(*labels.shape, size)
    return _pad_to(resize_nearest_2d(labels, nh, nw), size)
