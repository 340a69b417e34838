"""Differentiable primitives used by the policy.

Gradients come from torch's reverse-mode engine; every tensor here is float64.
The functions below pin down the numerical conventions the rest of the package
relies on (mask sentinel, batch-norm constants, infeasible-row detection).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

DTYPE = torch.float64
MASK_SENTINEL = -1e9
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class InfeasibleRowError(ValueError):
    """Raised when every entry of a softmax row is masked."""


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.as_tensor(data, dtype=DTYPE).clone().requires_grad_(requires_grad)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ValueError(f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax_rows(u: torch.Tensor, mask_additive: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last axis after adding ``mask_additive``.

    Entries of the mask are either 0 or :data:`MASK_SENTINEL`; a row whose
    entries are all sentinels has no valid distribution and raises.
    """
    if mask_additive is not None:
        masked = mask_additive <= MASK_SENTINEL / 2
        if bool(masked.all(dim=-1).any()):
            raise InfeasibleRowError("softmax row has every entry masked")
        u = u + mask_additive
    return torch.softmax(u, dim=-1)


@dataclass
class BatchNormState:
    mean: torch.Tensor
    var: torch.Tensor
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, features: int) -> "BatchNormState":
        return cls(torch.zeros(features, dtype=DTYPE), torch.ones(features, dtype=DTYPE))


def batch_norm(
    x: torch.Tensor,
    state: BatchNormState,
    training: bool,
    weight: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Normalize ``x`` (..., features) per feature over all leading positions.

    In training mode the batch statistics are used and the running statistics
    in ``state`` are updated in place (unbiased variance, like the usual BN).
    """
    f = x.shape[-1]
    if state.mean.shape[0] != f:
        raise ValueError(f"batch norm expects {state.mean.shape[0]} features, got {f}")
    flat = x.reshape(-1, f)
    if training:
        mean = flat.mean(dim=0)
        var = flat.var(dim=0, unbiased=False)
        with torch.no_grad():
            m = flat.shape[0]
            unbiased = var * (m / (m - 1)) if m > 1 else var
            state.mean.mul_(1 - state.momentum).add_(state.momentum * mean.detach())
            state.var.mul_(1 - state.momentum).add_(state.momentum * unbiased.detach())
    else:
        mean, var = state.mean, state.var
    out = (x - mean) / torch.sqrt(var + state.eps)
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(x, 0.0)


def dropout(x: torch.Tensor, p: float, training: bool, generator: torch.Generator | None = None) -> torch.Tensor:
    if not training or p == 0.0:
        return x
    keep = (torch.rand(x.shape, generator=generator, dtype=DTYPE) >= p).to(DTYPE)
    return x * keep / (1.0 - p)


def concat(parts: list[torch.Tensor], dim: int = -1) -> torch.Tensor:
    return torch.cat(parts, dim=dim)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a + b


def scale(a: torch.Tensor, c) -> torch.Tensor:
    return a * c


__all__ = [
    "DTYPE",
    "MASK_SENTINEL",
    "BatchNormState",
    "InfeasibleRowError",
    "add",
    "batch_norm",
    "concat",
    "dropout",
    "matmul",
    "relu",
    "scale",
    "softmax_rows",
    "tensor",
]
