"""Integer rounding with a straight-through gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class _RoundSTE(torch.autograd.Function):
    @staticmethod
    def forward(x):
        return torch.round(x)

    @staticmethod
    def setup_context(ctx, inputs, output):
        pass

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output

    @staticmethod
    def jvp(ctx, grad_input):
        return grad_input


def quantize_ste(x: torch.Tensor, check_finite: bool = True) -> torch.Tensor:
    """Round half-to-even in the forward pass; copy gradients unchanged backwards."""
    if check_finite and not bool(torch.isfinite(x).all()):
        raise ValueError("quantize_ste received non-finite values")
    return _RoundSTE.apply(x)


@dataclass(frozen=True)
class QuantizedLatent:
    """Integer symbols of ``Y`` (T x E) or ``W`` (T x C) with step size ``delta``."""

    symbols: np.ndarray
    delta: float = 1.0

    def __post_init__(self):
        if not np.issubdtype(self.symbols.dtype, np.integer):
            raise TypeError("symbols must be an integer array")

    @classmethod
    def from_tensor(cls, x: torch.Tensor) -> "QuantizedLatent":
        return cls(torch.round(x.detach()).to(torch.int64).cpu().numpy())

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.symbols).to(dtype)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.symbols.shape)
