"""
Optimal-transport normalization of the score matrix and discrete match extraction.

The score matrix is augmented with a dustbin row and column filled with a
learnable score and normalized with log-space Sinkhorn iterations. Real rows and
columns carry unit mass; dustbins absorb the rest.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import pandas as pd
import torch

from errors import ConfigurationError, NumericalFailure
from geometry import PatchGrid
from matcher import HeadOutput

logger = logging.getLogger(__name__)

MASKED_SCORE = -1e9


@dataclass
class AssignmentMatrix:
    log_probs: torch.Tensor  # (M+1, N+1) or (B, M+1, N+1); last row/column are dustbins
    iterations_used: int

    @property
    def probs(self) -> torch.Tensor:
        return self.log_probs.exp()

    def real_block(self) -> torch.Tensor:
        return self.log_probs[..., :-1, :-1]


def mask_scores(
    scores: torch.Tensor,
    row_valid: Optional[torch.Tensor] = None,
    col_valid: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Suppress excluded tokens so that only their dustbin entry can win."""
    if row_valid is None and col_valid is None:
        return scores
    keep = torch.ones_like(scores, dtype=torch.bool)
    if row_valid is not None:
        keep = keep & row_valid.to(scores.device).bool().unsqueeze(-1)
    if col_valid is not None:
        keep = keep & col_valid.to(scores.device).bool().unsqueeze(-2)
    return scores.masked_fill(~keep, MASKED_SCORE)


def sinkhorn(
    scores: torch.Tensor,
    alpha: Union[float, torch.Tensor],
    n_iters: int = 100,
    dustbin_mass: Optional[float] = None,
    tol: Optional[float] = None,
) -> AssignmentMatrix:
    """Log-space Sinkhorn on the dustbin-augmented score matrix.

    Real rows and columns get marginal 1. The dustbin row gets ``dustbin_mass``
    (default: the number of columns) and the dustbin column the balancing amount
    (default: the number of rows), so any subset of tokens can stay unmatched.
    With ``tol`` set, iteration stops once every row marginal is within ``tol``.
    """
    if n_iters < 1:
        raise ConfigurationError(f"n_iters must be >= 1, got {n_iters}")
    unbatched = scores.dim() == 2
    if unbatched:
        scores = scores.unsqueeze(0)
    if torch.isnan(scores).any():
        raise NumericalFailure("NaN in score matrix")
    if not torch.isfinite(scores).all():
        raise NumericalFailure("non-finite entries in score matrix")

    b, m, n = scores.shape
    row_bin = float(n) if dustbin_mass is None else float(dustbin_mass)
    col_bin = float(m) if dustbin_mass is None else row_bin + m - n
    if row_bin <= 0 or col_bin <= 0:
        raise ConfigurationError(f"dustbin marginals must be positive, got {row_bin} and {col_bin}")

    alpha = alpha.to(scores) if isinstance(alpha, torch.Tensor) else scores.new_tensor(float(alpha))
    bins0 = alpha.expand(b, m, 1)
    bins1 = alpha.expand(b, 1, n)
    corner = alpha.expand(b, 1, 1)
    couplings = torch.cat([torch.cat([scores, bins0], -1), torch.cat([bins1, corner], -1)], 1)

    log_mu = torch.cat([scores.new_zeros(m), scores.new_tensor([math.log(row_bin)])]).expand(b, -1)
    log_nu = torch.cat([scores.new_zeros(n), scores.new_tensor([math.log(col_bin)])]).expand(b, -1)
    u = torch.zeros_like(log_mu)
    v = torch.zeros_like(log_nu)

    used = 0
    for used in range(1, n_iters + 1):
        u = log_mu - torch.logsumexp(couplings + v.unsqueeze(1), dim=2)
        v = log_nu - torch.logsumexp(couplings + u.unsqueeze(2), dim=1)
        if tol is not None:
            rows = torch.logsumexp(couplings + u.unsqueeze(2) + v.unsqueeze(1), dim=2)
            if (rows.exp() - log_mu.exp()).abs().max() < tol:
                break

    log_probs = couplings + u.unsqueeze(2) + v.unsqueeze(1)
    if torch.isnan(log_probs).any():
        raise NumericalFailure(f"Sinkhorn diverged after {used} iterations")
    return AssignmentMatrix(log_probs[0] if unbatched else log_probs, used)


def _empty(kind=np.float64, shape=(0,)):
    return field(default_factory=lambda: np.zeros(shape, dtype=kind))


@dataclass
class MatchSet:
    """Accepted correspondences; one entry per matched (moving, fixed) patch pair."""

    moving_idx: np.ndarray = _empty(np.int64)
    fixed_idx: np.ndarray = _empty(np.int64)
    confidence: np.ndarray = _empty()
    sin: np.ndarray = _empty()
    cos: np.ndarray = _empty()
    scale_exponent: np.ndarray = _empty()
    moving_xy: np.ndarray = _empty(shape=(0, 2))
    fixed_xy: np.ndarray = _empty(shape=(0, 2))  # refined fixed coordinates
    fixed_center_xy: np.ndarray = _empty(shape=(0, 2))

    def __post_init__(self):
        if len(np.unique(self.moving_idx)) != len(self.moving_idx) or len(np.unique(self.fixed_idx)) != len(self.fixed_idx):
            raise ConfigurationError("a patch appears in more than one match")

    def __len__(self) -> int:
        return len(self.moving_idx)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "moving_idx": self.moving_idx,
            "fixed_idx": self.fixed_idx,
            "confidence": self.confidence,
            "theta_deg": np.degrees(np.arctan2(self.sin, self.cos)),
            "scale_exponent": self.scale_exponent,
            "moving_x": self.moving_xy[:, 0],
            "moving_y": self.moving_xy[:, 1],
            "fixed_x": self.fixed_xy[:, 0],
            "fixed_y": self.fixed_xy[:, 1],
        })


def extract_matches(
    assign: AssignmentMatrix,
    head: HeadOutput,
    grid: PatchGrid,
    threshold: float = 0.2,
    batch_index: int = 0,
) -> MatchSet:
    """Mutual-argmax pairs over the real block whose probability reaches ``threshold``.

    Argmaxes include the dustbin, so a token whose best option is the dustbin is
    never matched. Ties resolve to the lowest index. Fixed tokens with a
    degenerate angle prediction are dropped.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold must lie in (0, 1), got {threshold}")
    log_probs = assign.log_probs
    if log_probs.dim() == 3:
        log_probs = log_probs[batch_index]
    logp = log_probs.detach().cpu().double().numpy()
    m, n = logp.shape[0] - 1, logp.shape[1] - 1
    if m != grid.n_patches or n != grid.n_patches:
        raise ConfigurationError(f"assignment of size {m}x{n} does not fit a grid of {grid.n_patches} patches")

    best_col = np.argmax(logp[:m], axis=1)
    best_row = np.argmax(logp[:, :n], axis=0)

    def take(t: torch.Tensor) -> np.ndarray:
        t = t.detach().cpu().double()
        return (t[batch_index] if t.dim() == 2 else t).numpy()

    sin, cos, valid = take(head.sin), take(head.cos), take(head.valid.double()) > 0.5
    scale_exponent = take(head.scale_exponent)
    refine = head.refine.detach().cpu().double()
    refine = (refine[batch_index] if refine.dim() == 3 else refine).numpy()

    i = np.arange(m)
    j = best_col
    keep = (j < n)
    keep[keep] &= best_row[j[keep]] == i[keep]
    conf = np.exp(logp[i, j])
    keep &= conf >= threshold
    keep[keep] &= valid[j[keep]]
    i, j, conf = i[keep], j[keep], conf[keep]

    centers = grid.patch_centers()
    fixed_centers = centers[j]
    matches = MatchSet(
        moving_idx=i.astype(np.int64),
        fixed_idx=j.astype(np.int64),
        confidence=conf,
        sin=sin[j],
        cos=cos[j],
        scale_exponent=scale_exponent[j],
        moving_xy=centers[i],
        fixed_xy=fixed_centers + refine[j] * grid.patch_px,
        fixed_center_xy=fixed_centers,
    )
    logger.debug(f"Extracted {len(matches)} matches at threshold {threshold}")
    return matches
