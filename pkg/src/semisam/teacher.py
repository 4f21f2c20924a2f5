"""EMA teacher maintenance and Monte-Carlo uncertainty for UA-MT."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn

from .network import forward

EMA_CAP = 0.99


def ema_alpha(t: int, cap: float = EMA_CAP) -> float:
    """Decay that averages exactly over the first steps, then saturates at ``cap``."""
    if t < 0:
        raise ValueError("iteration must be non-negative")
    return min(1.0 - 1.0 / (t + 1), cap)


@torch.no_grad()
def ema_update(teacher, student, alpha: float):
    """In-place ``teacher <- alpha * teacher + (1 - alpha) * student``.

    Accepts two modules or two flat tensors with the same layout; returns the teacher.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if isinstance(teacher, nn.Module):
        t_params, s_params = list(teacher.parameters()), list(student.parameters())
    else:
        t_params, s_params = [teacher], [student]
    if len(t_params) != len(s_params) or any(a.shape != b.shape for a, b in zip(t_params, s_params)):
        raise ValueError("teacher and student parameter layouts differ")
    for tp, sp in zip(t_params, s_params):
        if alpha == 0.0:
            tp.copy_(sp)
        elif alpha != 1.0:
            tp.mul_(alpha).add_(sp, alpha=1.0 - alpha)
    return teacher


def entropy(prob_map: torch.Tensor, dim: int = 1, eps: float = 1e-12) -> torch.Tensor:
    """Predictive entropy along the class axis, in nats."""
    return -(prob_map * torch.log(prob_map.clamp_min(eps))).sum(dim=dim)


@torch.no_grad()
def estimate_uncertainty(
    teacher: nn.Module,
    patch: torch.Tensor,
    k_passes: int = 8,
    generator: Optional[torch.Generator] = None,
    stochastic: bool = True,
):
    """Mean class probabilities over ``k_passes`` dropout forwards and their entropy.

    Passes run sequentially, so the RNG draws follow pass order.
    """
    if k_passes < 2:
        raise ValueError("k_passes must be at least 2")
    total = None
    for _ in range(k_passes):
        p = forward(teacher, patch, stochastic=stochastic, generator=generator)
        total = p if total is None else total + p
    mean = total / k_passes
    class_dim = 1 if mean.dim() == 5 else 0
    return mean, entropy(mean, dim=class_dim)


def uncertainty_threshold(t: int, t_max: int, num_classes: int = 2) -> float:
    return (0.75 + 0.25 * t / t_max) * math.log(num_classes)


def uncertainty_mask(u_map: torch.Tensor, t: int, t_max: int, num_classes: int = 2) -> torch.Tensor:
    """1 where the teacher is confident enough to supervise the student."""
    return (u_map < uncertainty_threshold(t, t_max, num_classes)).to(torch.uint8)
