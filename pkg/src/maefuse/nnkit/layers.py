"""Parameterized layers and the ``Module`` container."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..errors import ConfigError
from . import functional as F
from .tensor import Parameter, Tensor, get_default_dtype


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by redrawing out-of-range entries."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(get_default_dtype())


def kaiming_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    """He-uniform for ReLU networks: U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=get_default_dtype())


def ones(shape) -> np.ndarray:
    return np.ones(shape, dtype=get_default_dtype())


class Module:
    """Container that discovers parameters and submodules from attributes.

    Attribute insertion order defines traversal order; lists of modules are
    named by position (``blocks.0.attn.wq``).
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def num_trainable(self) -> int:
        return sum(p.size for p in self.trainable_parameters())

    def assign_names(self, prefix: str = "") -> "Module":
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.frozen = True
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}.{key}")


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, std: float = 0.02):
        self.weight = Parameter(trunc_normal(rng, (out_dim, in_dim), std))
        self.bias = Parameter(zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, stride: int = 1, pad: int | None = None):
        self.weight = Parameter(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel)))
        self.bias = Parameter(zeros(out_ch))
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = Parameter(ones(dim))
        self.bias = Parameter(zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        self.weight = Parameter(ones(channels))
        self.bias = Parameter(zeros(channels))
        self.groups = groups
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class MultiHeadAttention(Module):
    """Attention block; ``kv_dim`` and ``out_dim`` default to ``dim``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, kv_dim: int | None = None, out_dim: int | None = None):
        if dim % heads:
            raise ConfigError(f"attention width {dim} is not divisible by heads={heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        out_dim = dim if out_dim is None else out_dim
        self.heads = heads
        self.wq = Parameter(trunc_normal(rng, (dim, dim)))
        self.bq = Parameter(zeros(dim))
        self.wk = Parameter(trunc_normal(rng, (dim, kv_dim)))
        self.bk = Parameter(zeros(dim))
        self.wv = Parameter(trunc_normal(rng, (dim, kv_dim)))
        self.bv = Parameter(zeros(dim))
        self.wo = Parameter(trunc_normal(rng, (out_dim, dim)))
        self.bo = Parameter(zeros(out_dim))

    def params(self) -> dict:
        return {k: getattr(self, k) for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}

    def forward(self, q: Tensor, kv: Tensor | None = None) -> Tensor:
        return F.multi_head_attention(q, q if kv is None else kv, self.params(), self.heads)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm ViT block: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))
