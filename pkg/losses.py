"""
Training loss: weighted sum of an assignment negative log-likelihood and L2 terms
for angle, coordinate refinement and scale, the last three evaluated only on
fixed patches that have a ground-truth match.
"""

import logging
from typing import Dict, Union

import torch
from pydantic import BaseModel, Field, model_validator

from assignment import AssignmentMatrix
from errors import ConfigurationError, NumericalFailure

logger = logging.getLogger(__name__)

SCALE_BASE = 1.5
TERMS = ("conf", "angle", "refine", "scale")


class LossWeights(BaseModel):
    w_conf: float = Field(1.0, gt=0.0)
    w_angle: float = Field(0.5, ge=0.0)
    w_refine: float = Field(0.5, ge=0.0)
    w_scale: float = Field(0.5, ge=0.0)
    scale_enabled: bool = True

    @model_validator(mode="after")
    def _pin_scale(self):
        if not self.scale_enabled and self.w_scale != 0.0:
            raise ConfigurationError("w_scale must be 0 when scale detection is disabled")
        return self

    @classmethod
    def for_variant(cls, scale_enabled: bool, **weights) -> "LossWeights":
        if not scale_enabled:
            weights["w_scale"] = 0.0
        return cls(scale_enabled=scale_enabled, **weights)


def _empty_term(like: torch.Tensor, name: str) -> torch.Tensor:
    logger.warning(f"No matched tokens for the {name} loss; term contributes 0")
    return like.sum() * 0.0


def confidence_loss(assign: Union[AssignmentMatrix, torch.Tensor], gt_assignment: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability over target entries, dustbin targets included."""
    log_probs = assign.log_probs if isinstance(assign, AssignmentMatrix) else assign
    if log_probs.shape != gt_assignment.shape:
        raise ConfigurationError(f"assignment {tuple(log_probs.shape)} and target {tuple(gt_assignment.shape)} differ")
    targets = gt_assignment > 0.5
    if not targets.any():
        raise ConfigurationError("ground-truth assignment has no target entries")
    return -log_probs[targets].mean()


def _broadcast_target(target, like: torch.Tensor) -> torch.Tensor:
    target = torch.as_tensor(target, dtype=like.dtype, device=like.device)
    while target.dim() < like.dim():
        target = target.unsqueeze(-1)
    return target.expand_as(like)


def angle_loss(pred_sin: torch.Tensor, pred_cos: torch.Tensor, gt_theta, matched: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between the normalized predicted (sin, cos) and the target on matched tokens."""
    matched = matched.bool()
    if not matched.any():
        return _empty_term(pred_sin, "angle")
    norm = torch.hypot(pred_sin, pred_cos).clamp_min(1e-12)
    theta = _broadcast_target(gt_theta, pred_sin)
    err = (pred_sin / norm - torch.sin(theta)) ** 2 + (pred_cos / norm - torch.cos(theta)) ** 2
    return err[matched].mean()


def refinement_loss(pred: torch.Tensor, gt_refine: torch.Tensor, matched: torch.Tensor) -> torch.Tensor:
    """MSE of (dx, dy) in patch units over matched tokens."""
    matched = matched.bool()
    if not matched.any():
        return _empty_term(pred, "refine")
    return ((pred - gt_refine) ** 2).mean(dim=-1)[matched].mean()


def scale_loss(pred_exponent: torch.Tensor, gt_scale, matched: torch.Tensor, enabled: bool = True) -> torch.Tensor:
    """Mean (1.5**p - s)**2 over matched tokens."""
    if not enabled:
        raise ConfigurationError("scale loss requested with scale detection disabled")
    matched = matched.bool()
    if not matched.any():
        return _empty_term(pred_exponent, "scale")
    scale = _broadcast_target(gt_scale, pred_exponent)
    return ((SCALE_BASE ** pred_exponent - scale) ** 2)[matched].mean()


def total_loss(parts: Dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    unknown = set(parts) - set(TERMS)
    if unknown:
        raise ConfigurationError(f"unknown loss terms {sorted(unknown)}")
    for name, value in parts.items():
        if not torch.isfinite(value).all():
            raise NumericalFailure(f"loss term {name!r} is not finite ({value.item()})")
    if "conf" not in parts:
        raise ConfigurationError("the confidence term is required")
    factors = {"conf": weights.w_conf, "angle": weights.w_angle, "refine": weights.w_refine, "scale": weights.w_scale}
    total = parts["conf"] * factors["conf"]
    for name in TERMS[1:]:
        if name in parts and factors[name] != 0.0:
            total = total + factors[name] * parts[name]
    return total
