"""Differentiable layer primitives on ``Tensor``.

Every function here returns a new tensor and registers its own closed-form
backward; none of them mutates its inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import ConfigError, ContractError
from .tensor import Tensor, as_tensor, make_op, matmul, reshape, transpose

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = out + bias
    return out


def relu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    return make_op(np.where(pos, xd, 0).astype(xd.dtype), (x,), lambda g: (g * pos,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))
    out = (xd * cdf).astype(xd.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype),)

    return make_op(out, (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), backward, "log_softmax")


def _normalize_backward(g_hat, xhat, inv_std, axes):
    m = g_hat.mean(axis=axes, keepdims=True)
    mx = (g_hat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - m - xhat * mx)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the per-feature affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    w, b = weight.data, bias.data
    out = xhat * w + b
    red = tuple(range(xd.ndim - 1))

    def backward(g):
        gx = _normalize_backward(g * w, xhat, inv_std, -1)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_op(out, (x, weight, bias), backward, "layer_norm")


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalization of an (N, C, H, W) map with per-channel affine."""
    n, c, h, w_ = x.shape
    if c % groups:
        raise ConfigError(f"group_norm: channels {c} not divisible by groups {groups}")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = ((xg - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(n, c, h, w_)
    wd = weight.data.reshape(1, c, 1, 1)
    bd = bias.data.reshape(1, c, 1, 1)
    out = xhat * wd + bd

    def backward(g):
        g_hat = (g * wd).reshape(n, groups, -1)
        gx = _normalize_backward(g_hat, xhat.reshape(n, groups, -1), inv_std, -1).reshape(n, c, h, w_)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_op(out, (x, weight, bias), backward, "group_norm")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation with zero padding, computed through im2col."""
    if x.ndim != 4:
        raise ContractError(f"conv2d: input must be (N,C,H,W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ContractError(f"conv2d: weight must be (K,C,kh,kw), got shape {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise ContractError(f"conv2d: input channels C={c} do not match weight channels {wc}")
    if bias is not None and bias.shape != (k,):
        raise ContractError(f"conv2d: bias shape {bias.shape} does not match output channels K={k}")
    if kh > h + 2 * pad:
        raise ContractError(f"conv2d: kernel height {kh} exceeds padded input height {h + 2 * pad}")
    if kw > w + 2 * pad:
        raise ContractError(f"conv2d: kernel width {kw} exceeds padded input width {w + 2 * pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xd, wd = x.data, weight.data
    wmat = wd.reshape(k, -1)

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = xd.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, k).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gw = (g2.T @ cols).reshape(wd.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        if not x.requires_grad:
            return None, gw, gb
        dcols = g2 @ wmat
        if kh == 1 and kw == 1 and stride == 1 and pad == 0:
            gx = dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        else:
            dcols = dcols.reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return make_op(np.ascontiguousarray(out), parents, lambda g: backward(g)[:2], "conv2d")
    return make_op(np.ascontiguousarray(out), parents, backward, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"max_pool2d: spatial dims must be even, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_op(out, (x,), backward, "max_pool2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_op(out, (x,), backward, "upsample_nearest2x")


def bilinear_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic (out, in) interpolation matrix with half-pixel centres.

    Equal sizes give the identity exactly.
    """
    m = np.zeros((out_size, in_size), dtype=np.float64)
    if in_size == out_size:
        np.fill_diagonal(m, 1.0)
        return m.astype(dtype)
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an (N, C, H, W) map to (out_h, out_w)."""
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return make_op(x.data.copy(), (x,), lambda g: (g,), "resize_bilinear")
    ry = bilinear_matrix(h, out_h, x.dtype)
    rx = bilinear_matrix(w, out_w, x.dtype)
    out = np.einsum("yh,nchw,xw->ncyx", ry, x.data, rx, optimize=True)

    def backward(g):
        return (np.einsum("yh,ncyx,xw->nchw", ry, g, rx, optimize=True),)

    return make_op(out, (x,), backward, "resize_bilinear")


def upsample_bilinear2x(x: Tensor) -> Tensor:
    return resize_bilinear(x, 2 * x.shape[2], 2 * x.shape[3])


def multi_head_attention(q: Tensor, kv: Tensor, params: dict, heads: int) -> Tensor:
    """Scaled dot-product attention with separate q/k/v/out projections.

    ``q`` is (N, Tq, Dq) and ``kv`` is (N, Tkv, Dkv). ``params`` maps
    ``wq, bq, wk, bk, wv, bv, wo, bo`` to tensors with weights stored as
    (out, in). The attention width D is the row count of ``wq``; the output
    width is the row count of ``wo``. Self-attention passes the same tensor
    twice.
    """
    d = params["wq"].shape[0]
    if d % heads:
        raise ConfigError(f"attention width {d} is not divisible by heads={heads}")
    n, tq, _ = q.shape
    tk = kv.shape[1]
    hd = d // heads
    qp = linear(q, params["wq"], params["bq"])
    kp = linear(kv, params["wk"], params["bk"])
    vp = linear(kv, params["wv"], params["bv"])
    qh = transpose(reshape(qp, (n, tq, heads, hd)), (0, 2, 1, 3))
    kh = transpose(reshape(kp, (n, tk, heads, hd)), (0, 2, 3, 1))
    vh = transpose(reshape(vp, (n, tk, heads, hd)), (0, 2, 1, 3))
    scores = matmul(qh, kh) * (1.0 / np.sqrt(hd))
    attn = softmax(scores, axis=-1)
    ctx = transpose(matmul(attn, vh), (0, 2, 1, 3))
    ctx = reshape(ctx, (n, tq, d))
    return linear(ctx, params["wo"], params["bo"])


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of ``-z_y + logsumexp(z)`` over rows of an (N, C) logit matrix."""
    target = np.asarray(target, dtype=np.intp)
    c = logits.shape[-1]
    if target.size and (target.min() < 0 or target.max() >= c):
        raise ContractError(f"class index out of range [0, {c})")
    lp = log_softmax(logits, axis=-1)
    rows = np.arange(logits.shape[0])
    return -(lp[rows, target].mean())


__all__ = [
    "as_tensor",
    "bilinear_matrix",
    "conv2d",
    "cross_entropy",
    "gelu",
    "group_norm",
    "layer_norm",
    "linear",
    "log_softmax",
    "max_pool2d",
    "multi_head_attention",
    "relu",
    "resize_bilinear",
    "softmax",
    "upsample_bilinear2x",
    "upsample_nearest2x",
]
