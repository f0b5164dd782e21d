"""Autodiff helpers, AdamW and the learning-rate schedule.

Tensors are plain ``torch.Tensor`` objects; this module only adds what the
training loop needs on top of torch autograd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch


class GradCheckError(ValueError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: torch.Tensor
    numeric: torch.Tensor

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(
    fn: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    epsilon: float = 1e-6,
    tolerance: float | None = None,
    dtype: torch.dtype = torch.float64,
) -> GradCheckReport:
    """Compare the autograd gradient of a scalar function with central differences.

    ``fn`` must accept a tensor of ``dtype`` and return a scalar. The relative
    error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``. If ``tolerance``
    is given, a ``GradCheckError`` is raised when it is not met.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = point.detach().to(dtype).clone().requires_grad_(True)
    value = fn(x)
    if value.numel() != 1:
        raise ValueError("grad_check needs a scalar function")
    if not torch.isfinite(value):
        raise GradCheckError("function is not finite at the check point")
    (analytic,) = torch.autograd.grad(value, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().reshape(-1)

    flat = x.detach().reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            probe = flat.clone()
            probe[i] += epsilon
            f_plus = fn(probe.view_as(x))
            probe[i] -= 2 * epsilon
            f_minus = fn(probe.view_as(x))
            if not (torch.isfinite(f_plus) and torch.isfinite(f_minus)):
                raise GradCheckError(f"non-finite function value at coordinate {i}")
            numeric[i] = (f_plus - f_minus) / (2 * epsilon)

    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(numeric, 1e-8))
    rel = (analytic - numeric).abs() / denom
    worst = int(torch.argmax(rel)) if rel.numel() else 0
    report = GradCheckReport(float(rel.max()) if rel.numel() else 0.0, worst, analytic, numeric)
    if tolerance is not None and not report.passed(tolerance):
        raise GradCheckError(
            f"gradient mismatch at coordinate {worst}: analytic={analytic[worst]:.6g} "
            f"numeric={numeric[worst]:.6g} rel={report.max_rel_error:.3g}"
        )
    return report


@dataclass
class OptimizerState:
    """First/second moment accumulators, one pair per parameter."""

    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)
    step: int = 0


def adamw_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: OptimizerState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 0.1,
    eps: float = 1e-8,
    decay_mask: Sequence[bool] | None = None,
) -> OptimizerState:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    if len(state.exp_avg) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    beta1, beta2 = betas
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape or state.exp_avg[i].shape != p.shape:
                raise ValueError(f"shape mismatch for parameter {i}: {tuple(p.shape)} vs {tuple(g.shape)}")
            m, v = state.exp_avg[i], state.exp_avg_sq[i]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            if decay_mask is None or decay_mask[i]:
                p.mul_(1.0 - lr * weight_decay)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m / bc1, denom, value=-lr)
    return state


class AdamW:
    """Thin stateful wrapper over :func:`adamw_step` for a module's parameters.

    Weight decay is applied only to parameters flagged in ``decay_mask``.
    """

    def __init__(self, params: Iterable[torch.Tensor], betas=(0.9, 0.95), weight_decay=0.1, decay_mask=None):
        self.params = [p for p in params]
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.decay_mask = list(decay_mask) if decay_mask is not None else None
        self.state = OptimizerState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr,
                   self.betas, self.weight_decay, decay_mask=self.decay_mask)


def clip_grad_norm(params: Iterable[torch.Tensor], max_norm: float = 1.0) -> float:
    return float(torch.nn.utils.clip_grad_norm_(list(params), max_norm))


def lr_schedule(step: int, warmup_steps: int, max_steps: int, lr_max: float = 6e-4, lr_min: float = 6e-5) -> float:
    """Linear warmup from 0, then cosine decay to ``lr_min``; flat afterwards."""
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    if step >= max_steps:
        return lr_min
    progress = (step - warmup_steps) / (max_steps - warmup_steps)
    return lr_min + 0.5 * (1.0 + math.cos(math.pi * progress)) * (lr_max - lr_min)
