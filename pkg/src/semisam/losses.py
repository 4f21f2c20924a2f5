"""Objective terms and their weighted combination.

Probability maps are (B, C, D, H, W) or (C, D, H, W) tensors; masks drop the
class axis. Foreground is class 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .schedules import lambda_c, lambda_s

DICE_EPS = 1e-5
PROB_CLAMP = 1e-7


def _class_dim(prob_map: torch.Tensor) -> int:
    return 1 if prob_map.dim() == 5 else 0


def _check(prob_map: torch.Tensor, mask: torch.Tensor):
    cd = _class_dim(prob_map)
    spatial = prob_map.shape[:cd] + prob_map.shape[cd + 1:]
    if tuple(mask.shape) != tuple(spatial):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match map shape {tuple(prob_map.shape)}")
    return cd


def one_hot(mask: torch.Tensor, num_classes: int = 2, dtype=torch.float32) -> torch.Tensor:
    """Class-first one-hot encoding of a label map, batched or not."""
    oh = F.one_hot(mask.long(), num_classes).to(dtype)
    if mask.dim() == 4:
        return oh.permute(0, 4, 1, 2, 3)
    return oh.permute(3, 0, 1, 2)


def dice_loss(prob_map: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    cd = _check(prob_map, mask)
    p = prob_map.select(cd, 1)
    y = mask.to(p.dtype)
    return 1.0 - (2.0 * (p * y).sum() + DICE_EPS) / (p.sum() + y.sum() + DICE_EPS)


def ce_loss(prob_map: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    cd = _check(prob_map, mask)
    p_true = prob_map.gather(cd, mask.long().unsqueeze(cd)).squeeze(cd)
    return -torch.log(p_true.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).mean()


def supervised_loss(prob_map: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return 0.5 * dice_loss(prob_map, mask) + 0.5 * ce_loss(prob_map, mask)


def consistency_loss(
    student_pm: torch.Tensor, teacher_pm: torch.Tensor, mask: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Mean squared difference over class channels, optionally restricted to ``mask``."""
    if student_pm.shape != teacher_pm.shape:
        raise ValueError(f"shape mismatch: {tuple(student_pm.shape)} vs {tuple(teacher_pm.shape)}")
    sq = (student_pm - teacher_pm) ** 2
    if mask is None:
        return sq.mean()
    cd = _check(student_pm, mask)
    m = mask.to(sq.dtype).unsqueeze(cd)
    n_sel = m.sum() * student_pm.shape[cd]
    if n_sel == 0:
        return (sq * m).sum()
    return (sq * m).sum() / n_sel


def sam_consistency_loss(student_pm: torch.Tensor, pseudo_label: torch.Tensor) -> torch.Tensor:
    """Consistency against a hard pseudo-label, encoded one-hot."""
    num_classes = student_pm.shape[_class_dim(student_pm)]
    return consistency_loss(student_pm, one_hot(pseudo_label, num_classes, student_pm.dtype))


@dataclass
class LossBreakdown:
    l_sup: torch.Tensor
    l_con: torch.Tensor
    l_sam: torch.Tensor
    lambda_c: float
    lambda_s: float
    total: torch.Tensor
    sam_skipped: bool

    def as_row(self) -> dict:
        return {
            "lambda_c": self.lambda_c,
            "lambda_s": self.lambda_s,
            "l_sup": float(self.l_sup.detach()),
            "l_con": float(self.l_con.detach()),
            "l_sam": float(self.l_sam.detach()),
            "total": float(self.total.detach()),
            "sam_skipped": int(self.sam_skipped),
        }


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.tensor(float(x), dtype=torch.float64)


def total_objective(l_sup, l_con, l_sam, t: int, t_max: int, sam_skipped: bool, w_base: float = 0.1) -> LossBreakdown:
    """``l_sup + lambda_c * l_con + lambda_s * l_sam``; the last term drops out when skipped."""
    terms = {"l_sup": _as_tensor(l_sup), "l_con": _as_tensor(l_con), "l_sam": _as_tensor(l_sam)}
    for name, value in terms.items():
        if name == "l_sam" and sam_skipped:
            continue
        if not math.isfinite(float(value.detach())):
            raise FloatingPointError(f"non-finite loss term {name} = {float(value.detach())} at iteration {t}")
    lc = lambda_c(t, t_max, w_base)
    ls = lambda_s(t, t_max, w_base)
    total = terms["l_sup"] + lc * terms["l_con"]
    if not sam_skipped:
        total = total + ls * terms["l_sam"]
    return LossBreakdown(
        l_sup=terms["l_sup"],
        l_con=terms["l_con"],
        l_sam=terms["l_sam"] if not sam_skipped else torch.zeros_like(terms["l_sam"]).detach(),
        lambda_c=lc,
        lambda_s=ls,
        total=total,
        sam_skipped=sam_skipped,
    )
