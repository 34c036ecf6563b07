"""
Configuration: every tunable of the registration system in one validated model.

Config files are plain text ``key = value`` lines. Environment variables named
``ROTIR_<KEY>`` override file values, and explicit overrides win over both.
"""

import logging
import os
import re
from pathlib import Path
from typing import Literal, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from backbone import BackboneConfig
from datasynth import SynthesisRanges
from errors import ConfigurationError
from geometry import PatchGrid
from losses import LossWeights

logger = logging.getLogger(__name__)

ENV_PREFIX = "ROTIR_"
VARIANT_PATTERN = re.compile(r"^[TF]{3}\*?$")


class VariantConfig(BaseModel):
    """Three letters: up-sampling path, scale detection, rectangle mask; a trailing ``*`` disables refinement."""

    model_config = ConfigDict(frozen=True)

    use_upsampling: bool = False
    scale_detection: bool = False
    rectangle_mask: bool = True
    refine_at_inference: bool = True

    @classmethod
    def from_name(cls, name: str) -> "VariantConfig":
        name = name.strip().upper()
        if not VARIANT_PATTERN.match(name):
            raise ConfigurationError(f"variant must be three T/F letters with an optional '*', got {name!r}")
        return cls(
            use_upsampling=name[0] == "T",
            scale_detection=name[1] == "T",
            rectangle_mask=name[2] == "T",
            refine_at_inference=not name.endswith("*"),
        )

    @property
    def name(self) -> str:
        letters = "".join("T" if flag else "F" for flag in (self.use_upsampling, self.scale_detection, self.rectangle_mask))
        return letters + ("" if self.refine_at_inference else "*")

    @property
    def model_name(self) -> str:
        return f"RoTIR_{self.name}"


class RoTIRConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # training
    seed: int = 0
    learning_rate: float = Field(1e-3, gt=0.0)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(8, ge=1)
    n_samples: int = Field(2000, ge=1)

    # geometry and backbone
    image_size: int = 256
    grid_size: int = 16
    group_order: int = 8
    lift_kernel_size: int = 5
    kernel_size: int = 3
    widths: Tuple[int, ...] = (2, 4, 8, 8)

    # matcher and assignment
    d_model: int = 96
    n_heads: int = 4
    n_blocks: int = 4
    score_temperature: float = Field(10.0, gt=0.0)
    sinkhorn_iters_train: int = Field(100, ge=1)
    sinkhorn_iters_infer: int = Field(200, ge=1)
    dustbin_init: float = 1.0
    match_threshold: float = Field(0.2, gt=0.0, lt=1.0)
    estimator: Literal["params", "procrustes"] = "params"

    # losses
    w_conf: float = Field(1.0, gt=0.0)
    w_angle: float = Field(0.5, ge=0.0)
    w_refine: float = Field(0.5, ge=0.0)
    w_scale: float = Field(0.5, ge=0.0)

    # synthesis
    f_min: float = Field(0.3, gt=0.0, le=1.0)
    scale_range: float = Field(1.15, ge=1.0)
    noise_std: float = Field(0.02, ge=0.0)
    background: float = Field(0.1, ge=0.0, le=1.0)

    # evaluation
    cwssim_levels: int = 4
    cwssim_orientations: int = 6
    cwssim_window: int = 7
    cwssim_k: float = 0.0
    cwssim_masked: bool = True
    mask_threshold: float = 0.5

    variant: str = "FFT"

    @field_validator("widths", mode="before")
    @classmethod
    def _split_widths(cls, value):
        if isinstance(value, str):
            return tuple(int(part) for part in value.replace(" ", "").split(",") if part)
        return value

    @field_validator("variant")
    @classmethod
    def _check_variant(cls, value: str) -> str:
        return VariantConfig.from_name(value).name

    @property
    def variant_config(self) -> VariantConfig:
        return VariantConfig.from_name(self.variant)

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid.for_image(self.image_size, self.grid_size)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            input_size=self.image_size,
            grid_size=self.grid_size,
            use_upsampling=self.variant_config.use_upsampling,
            widths=self.widths,
            group_order=self.group_order,
            lift_kernel_size=self.lift_kernel_size,
            kernel_size=self.kernel_size,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights.for_variant(
            self.variant_config.scale_detection,
            w_conf=self.w_conf,
            w_angle=self.w_angle,
            w_refine=self.w_refine,
            w_scale=self.w_scale,
        )

    def synthesis_ranges(self) -> SynthesisRanges:
        return SynthesisRanges(
            image_size=self.image_size,
            scale_range=self.scale_range,
            scale_enabled=self.variant_config.scale_detection,
            noise_std=self.noise_std,
            background=self.background,
        )


def load_config(path: Optional[str] = None, **overrides) -> RoTIRConfig:
    values = {}
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(f"config file not found: {path}")
        values.update({key.strip().lower(): value for key, value in dotenv_values(path).items()})
    for key in RoTIRConfig.model_fields:
        env_value = os.getenv(f"{ENV_PREFIX}{key.upper()}")
        if env_value is not None:
            values[key] = env_value
    values.update({key: value for key, value in overrides.items() if value is not None})
    empty = [key for key, value in values.items() if value is None]
    if empty:
        raise ConfigurationError(f"config keys without a value: {empty}")
    try:
        config = RoTIRConfig(**values)
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration: {e}") from e
    logger.debug(f"Loaded configuration for variant {config.variant}")
    return config


def write_config(config: RoTIRConfig, path) -> Path:
    path = Path(path)
    lines = []
    for key, value in config.model_dump().items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n")
    return path
