"""
Equivariant feature extractor: image -> S x S grid of match features.

Down-sampling path: lifting conv, four stride-2 basic blocks (256 -> 16), a 1x1
regular conv to 4 fields, the frequency-1 projection to 4 vector fields (8
channels) and a norm gate on those vectors. Optional up-sampling path: the deep
16 x 16 regular field is nearest-neighbour up-sampled to 32 x 32, passed
through a size-keeping basic block, reduced to 2 gated vector fields (4
channels) and rearranged cell-wise into 16 x 16 x 16. Both outputs are
concatenated to 24 channels.
"""

import copy
import logging
from dataclasses import dataclass
from typing import Tuple

import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, model_validator

from equivariant_core import (
    FeatureField,
    FieldKind,
    FieldType,
    InnerRMSNorm,
    LiftConv,
    NormNonlinearity,
    RegularConv,
    equivariance_residual,
    regular_to_vector_tensor,
)
from errors import ConfigurationError

logger = logging.getLogger(__name__)


class BackboneConfig(BaseModel):
    input_size: int = 256
    grid_size: int = 16
    use_upsampling: bool = True
    widths: Tuple[int, ...] = (2, 4, 8, 8)
    group_order: int = 8
    lift_kernel_size: int = 5
    kernel_size: int = 3
    vector_fields: int = 4
    upsample_vector_fields: int = 2

    @model_validator(mode="after")
    def _check_geometry(self):
        if self.input_size % self.grid_size:
            raise ConfigurationError(f"input size {self.input_size} is not a multiple of grid size {self.grid_size}")
        if self.patch_px != 2 ** len(self.widths):
            raise ConfigurationError(
                f"{len(self.widths)} stride-2 stages need patch size {2 ** len(self.widths)}, got {self.patch_px}"
            )
        return self

    @property
    def patch_px(self) -> int:
        return self.input_size // self.grid_size

    @property
    def down_channels(self) -> int:
        return 2 * self.vector_fields

    @property
    def up_channels(self) -> int:
        # 2 vector fields at twice the resolution, 2x2 cells folded into channels
        return 2 * self.upsample_vector_fields * 4 if self.use_upsampling else 0

    @property
    def out_channels(self) -> int:
        return self.down_channels + self.up_channels


@dataclass
class MatchFeatures:
    grid: torch.Tensor  # (B, C, S, S)
    source: str  # "moving" or "fixed"

    def __post_init__(self):
        if self.source not in ("moving", "fixed"):
            raise ConfigurationError(f"unknown feature source {self.source!r}")


def space_to_depth(x: torch.Tensor, cell: int = 2) -> torch.Tensor:
    """(B, C, H, W) -> (B, C * cell^2, H / cell, W / cell); channel = c * cell^2 + row-major cell offset."""
    return F.pixel_unshuffle(x, cell)


def depth_to_space(x: torch.Tensor, cell: int = 2) -> torch.Tensor:
    return F.pixel_shuffle(x, cell)


class BasicBlock(nn.Module):
    """Steerable conv -> field RMS norm -> ReLU on regular fields; stride 2 halves the grid."""

    def __init__(self, in_fields: int, out_fields: int, group_order: int = 8, kernel_size: int = 3, stride: int = 1):
        super().__init__()
        self.in_type = FieldType(FieldKind.REGULAR, group_order, in_fields)
        self.out_type = FieldType(FieldKind.REGULAR, group_order, out_fields)
        self.conv = RegularConv(in_fields, out_fields, group_order, kernel_size, stride)
        self.norm = InnerRMSNorm(out_fields, group_order)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.norm(self.conv(x)))


def basic_block(x: FeatureField, block: BasicBlock) -> FeatureField:
    if x.field_type != block.in_type:
        raise ConfigurationError(f"block expects {block.in_type}, got {x.field_type}")
    return FeatureField(block(x.tensor), block.out_type)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig = None):
        super().__init__()
        self.config = config or BackboneConfig()
        cfg = self.config
        n = cfg.group_order
        self.lift = LiftConv(1, cfg.widths[0], n, cfg.lift_kernel_size)
        self.lift_norm = InnerRMSNorm(cfg.widths[0], n)

        blocks = []
        in_fields = cfg.widths[0]
        for width in cfg.widths:
            blocks.append(BasicBlock(in_fields, width, n, cfg.kernel_size, stride=2))
            in_fields = width
        self.down_blocks = nn.ModuleList(blocks)
        self.to_vector = RegularConv(cfg.widths[-1], cfg.vector_fields, n, kernel_size=1)
        self.vector_gate = NormNonlinearity(cfg.vector_fields)

        if cfg.use_upsampling:
            self.up_block = BasicBlock(cfg.widths[-1], cfg.widths[-1], n, cfg.kernel_size, stride=1)
            self.up_to_vector = RegularConv(cfg.widths[-1], cfg.upsample_vector_fields, n, kernel_size=1)
            self.up_vector_gate = NormNonlinearity(cfg.upsample_vector_fields)

    @property
    def deep_type(self) -> FieldType:
        return FieldType(FieldKind.REGULAR, self.config.group_order, self.config.widths[-1])

    def _check_image(self, image: torch.Tensor) -> None:
        size = self.config.input_size
        if image.dim() != 4 or image.shape[1] != 1 or image.shape[-2:] != (size, size):
            raise ConfigurationError(f"backbone expects images of shape (B, 1, {size}, {size}), got {tuple(image.shape)}")

    def _down(self, image: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        self._check_image(image)
        x = F.relu(self.lift_norm(self.lift(image)))
        for block in self.down_blocks:
            x = block(x)
        vectors = self.vector_gate(regular_to_vector_tensor(self.to_vector(x), self.config.group_order))
        return vectors, x

    def downsample_path(self, image: torch.Tensor) -> FeatureField:
        vectors, _ = self._down(image)
        return FeatureField(vectors, FieldType(FieldKind.VECTOR, self.config.group_order, self.config.vector_fields))

    def upsample_path(self, intermediate: torch.Tensor) -> torch.Tensor:
        if not self.config.use_upsampling:
            raise ConfigurationError("up-sampling path is disabled for this variant")
        x = F.interpolate(intermediate, scale_factor=2, mode="nearest")
        x = self.up_block(x)
        x = self.up_vector_gate(regular_to_vector_tensor(self.up_to_vector(x), self.config.group_order))
        return space_to_depth(x)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        vectors, deep = self._down(image)
        if not self.config.use_upsampling:
            return vectors
        return torch.cat([vectors, self.upsample_path(deep)], dim=1)

    def extract_features(self, image: torch.Tensor, source: str) -> MatchFeatures:
        return MatchFeatures(self(image), source)


def equivariance_report(backbone: Backbone, trials: int = 5, size: int = 32, seed: int = 0) -> pd.DataFrame:
    """Quarter-turn equivariance residuals of every backbone layer and of the full down path.

    Runs in float64 on a copy of the backbone in eval mode. Single layers are fed
    random ``size`` x ``size`` fields, the down path full-size random images.
    """
    model = copy.deepcopy(backbone).double().eval()
    cfg = model.config
    n = cfg.group_order
    generator = torch.Generator().manual_seed(seed)
    trivial = FieldType(FieldKind.TRIVIAL, n, 1)

    def regular(m):
        return FieldType(FieldKind.REGULAR, n, m)

    def vector(m):
        return FieldType(FieldKind.VECTOR, n, m)

    layers = [("lift_conv", model.lift, trivial, regular(cfg.widths[0]))]
    for i, block in enumerate(model.down_blocks):
        layers.append((f"down_block_{i}", block, block.in_type, block.out_type))
    layers.append(("to_vector", model.to_vector, model.deep_type, regular(cfg.vector_fields)))
    layers.append(("vector_gate", model.vector_gate, vector(cfg.vector_fields), vector(cfg.vector_fields)))
    if cfg.use_upsampling:
        layers.append(("up_block", model.up_block, model.up_block.in_type, model.up_block.out_type))
        layers.append(("up_vector_gate", model.up_vector_gate,
                       vector(cfg.upsample_vector_fields), vector(cfg.upsample_vector_fields)))

    rows = []
    for name, layer, in_type, out_type in layers:
        for _ in range(trials):
            x = torch.randn(1, in_type.size, size, size, generator=generator, dtype=torch.float64)
            for turns in (1, 2, 3):
                rows.append({"layer": name, "quarter_turns": turns,
                             "residual": equivariance_residual(layer, x, in_type, out_type, turns)})

    vector_type = vector(cfg.vector_fields)
    for _ in range(trials):
        image = torch.rand(1, 1, cfg.input_size, cfg.input_size, generator=generator, dtype=torch.float64)
        for turns in (1, 2, 3):
            residual = equivariance_residual(lambda t: model.downsample_path(t).tensor, image, trivial, vector_type, turns)
            rows.append({"layer": "downsample_path", "quarter_turns": turns, "residual": residual})

    report = pd.DataFrame(rows)
    logger.info(f"Equivariance check: worst residual {report['residual'].max():.3e} over {len(report)} evaluations")
    return report
