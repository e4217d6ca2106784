"""Finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, default_dtype


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    per_input: list[float]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|, 1e-8)`` with ``|.|`` the Euclidean norm."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def numerical_grad(fn: Callable[..., Tensor], arrays: list[np.ndarray], which: int, h: float = 1e-5) -> np.ndarray:
    x = arrays[which]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(fn(*[Tensor(a) for a in arrays]))
        flat[i] = orig - h
        fm = _scalar(fn(*[Tensor(a) for a in arrays]))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], tol: float = 1e-4, h: float = 1e-5) -> GradCheckResult:
    """Compare backward() against central differences in float64.

    ``fn`` receives one ``Tensor`` per input and must return a scalar.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    with default_dtype(np.float64):
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*leaves)
        if not isinstance(out, Tensor) or out.size != 1:
            shape = getattr(out, "shape", type(out))
            raise ContractError(f"grad_check needs a scalar-valued computation, got {shape}")
        out.backward()
        errors = []
        for i, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
            numeric = numerical_grad(fn, arrays, i, h)
            errors.append(relative_error(analytic, numeric))
    worst = max(errors) if errors else 0.0
    return GradCheckResult(passed=worst < tol, max_rel_error=worst, per_input=errors)


def _scalar(t: Tensor) -> float:
    if t.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued computation, got {t.shape}")
    return float(t.data.reshape(()))
