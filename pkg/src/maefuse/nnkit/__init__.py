"""Minimal numpy autodiff: tensors, layers, AdamW, seeded streams."""

from . import functional
from .gradcheck import GradCheckResult, grad_check, relative_error
from .layers import (
    Conv2d,
    GroupNorm,
    LayerNorm,
    Linear,
    Mlp,
    Module,
    MultiHeadAttention,
    TransformerBlock,
    kaiming_uniform,
    trunc_normal,
)
from .optim import AdamW, AdamWState, adamw_step
from .rng import stream
from .tensor import (
    Parameter,
    Tensor,
    concat,
    default_dtype,
    get_default_dtype,
    no_grad,
    take_along,
)

__all__ = [
    "AdamW",
    "AdamWState",
    "Conv2d",
    "GradCheckResult",
    "GroupNorm",
    "LayerNorm",
    "Linear",
    "Mlp",
    "Module",
    "MultiHeadAttention",
    "Parameter",
    "Tensor",
    "TransformerBlock",
    "adamw_step",
    "concat",
    "default_dtype",
    "functional",
    "get_default_dtype",
    "grad_check",
    "kaiming_uniform",
    "no_grad",
    "relative_error",
    "stream",
    "take_along",
    "trunc_normal",
]
