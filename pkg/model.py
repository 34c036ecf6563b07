"""
The full registration network (equivariant backbone, transformer matcher,
learnable dustbin score) and its checkpoint format.
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from assignment import AssignmentMatrix, mask_scores, sinkhorn
from backbone import Backbone
from config import RoTIRConfig, write_config
from errors import ConfigurationError
from matcher import HeadOutput, Matcher, score_matrix

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class ModelOutput:
    scores: torch.Tensor  # (B, L, L) before normalization
    assignment: AssignmentMatrix
    head: HeadOutput


class RegistrationModel(nn.Module):
    def __init__(self, config: Optional[RoTIRConfig] = None):
        super().__init__()
        self.config = config or RoTIRConfig()
        cfg = self.config
        self.backbone = Backbone(cfg.backbone_config())
        self.matcher = Matcher(self.backbone.config.out_channels, cfg.grid_size, cfg.d_model, cfg.n_heads, cfg.n_blocks)
        self.bin_score = nn.Parameter(torch.tensor(float(cfg.dustbin_init)))

    def forward(
        self,
        moving: torch.Tensor,
        fixed: torch.Tensor,
        valid_moving: Optional[torch.Tensor] = None,
        valid_fixed: Optional[torch.Tensor] = None,
        n_iters: Optional[int] = None,
    ) -> ModelOutput:
        """Score every moving token against every fixed token and normalize with Sinkhorn.

        ``valid_*`` are (B, L) token masks; excluded tokens are forced to the dustbin.
        """
        feat_moving = self.backbone.extract_features(moving, "moving")
        feat_fixed = self.backbone.extract_features(fixed, "fixed")
        seq_moving, seq_fixed = self.matcher.match_transform(feat_moving, feat_fixed)
        head = self.matcher.output_head(seq_fixed)
        # the matchability logit of a fixed token shifts its whole column
        scores = score_matrix(seq_moving, seq_fixed, self.config.score_temperature) + head.matchability.unsqueeze(-2)
        scores = mask_scores(scores, valid_moving, valid_fixed)
        if n_iters is None:
            n_iters = self.config.sinkhorn_iters_train if self.training else self.config.sinkhorn_iters_infer
        return ModelOutput(scores, sinkhorn(scores, self.bin_score, n_iters), head)


@dataclass
class TrainState:
    model: RegistrationModel
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    seed: int = 0
    loss_history: List[dict] = field(default_factory=list)


def make_optimizer(model: RegistrationModel) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=model.config.learning_rate)


def save_checkpoint(state: TrainState, path) -> Path:
    """Write the checkpoint atomically and the config next to it as ``config.env``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.model.config.model_dump(),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "seed": state.seed,
        "loss_history": state.loss_history,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    write_config(state.model.config, path.parent / "config.env")
    return path


def load_checkpoint(path, variant: Optional[str] = None) -> Tuple[RegistrationModel, TrainState]:
    """Rebuild the model (optionally under another variant name) and its training state."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    settings = dict(payload["config"])
    if variant is not None:
        trained = RoTIRConfig(**settings).variant_config
        requested = RoTIRConfig(**{**settings, "variant": variant}).variant_config
        if requested.use_upsampling != trained.use_upsampling:
            raise ConfigurationError(f"checkpoint was trained as {trained.name}; {requested.name} needs other weights")
        settings["variant"] = variant
    model = RegistrationModel(RoTIRConfig(**settings))
    model.load_state_dict(payload["model"])
    optimizer = make_optimizer(model)
    optimizer.load_state_dict(payload["optimizer"])
    state = TrainState(model, optimizer, payload["epoch"], payload["seed"], list(payload["loss_history"]))
    logger.info(f"Loaded {model.config.variant} checkpoint from {path} (epoch {state.epoch})")
    return model, state
