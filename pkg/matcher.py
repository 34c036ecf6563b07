"""
Transformer matching head.

Feature grids from both images are projected to the model width, given a 2-D
sinusoidal positional encoding, flattened to token sequences and passed through
blocks of (self, self, cross, cross) linear-attention layers. Weights are shared
between the two streams. A linear head turns every fixed-image token into six
channels: (sin, cos, scale exponent, dx, dy, matchability).
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from backbone import MatchFeatures
from errors import ConfigurationError

logger = logging.getLogger(__name__)

HEAD_CHANNELS = 6
SCALE_BASE = 1.5
REFINE_LIMIT = 0.5
DEGENERATE_NORM = 1e-12


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (B, L, D)
    origin: str  # "moving" or "fixed"


@dataclass
class HeadOutput:
    """Decoded per-token head channels; all tensors are (B, L) except ``refine`` (B, L, 2)."""

    sin: torch.Tensor
    cos: torch.Tensor
    valid: torch.Tensor
    scale_exponent: torch.Tensor
    refine: torch.Tensor
    matchability: torch.Tensor

    @classmethod
    def from_raw(cls, raw: torch.Tensor) -> "HeadOutput":
        if raw.shape[-1] != HEAD_CHANNELS:
            raise ConfigurationError(f"head output needs {HEAD_CHANNELS} channels, got {raw.shape[-1]}")
        sin_raw, cos_raw = raw[..., 0], raw[..., 1]
        norm = torch.hypot(sin_raw, cos_raw)
        valid = norm > DEGENERATE_NORM
        safe = norm.clamp_min(DEGENERATE_NORM)
        return cls(
            sin=sin_raw / safe,
            cos=cos_raw / safe,
            valid=valid,
            scale_exponent=raw[..., 2],
            refine=REFINE_LIMIT * torch.tanh(raw[..., 3:5]),
            matchability=raw[..., 5],
        )

    @property
    def theta(self) -> torch.Tensor:
        return torch.atan2(self.sin, self.cos)

    @property
    def scale(self) -> torch.Tensor:
        return SCALE_BASE ** self.scale_exponent


def positional_encoding(grid_size: int, d_model: int) -> torch.Tensor:
    """2-D sinusoidal encoding, (S*S, D), token index = row * S + column.

    Channels cycle through sin(column), cos(column), sin(row), cos(row) at
    geometrically spaced frequencies starting at 1.
    """
    if d_model % 4:
        raise ConfigurationError(f"model width must be divisible by 4, got {d_model}")
    quarter = d_model // 4
    div = torch.exp(torch.arange(quarter, dtype=torch.float64) * (-math.log(10000.0) / quarter)).view(-1, 1, 1)
    index = torch.arange(grid_size, dtype=torch.float64)
    rows = index.view(1, -1, 1).expand(1, grid_size, grid_size)
    cols = index.view(1, 1, -1).expand(1, grid_size, grid_size)
    pe = torch.zeros(d_model, grid_size, grid_size, dtype=torch.float64)
    pe[0::4] = torch.sin(cols * div)
    pe[1::4] = torch.cos(cols * div)
    pe[2::4] = torch.sin(rows * div)
    pe[3::4] = torch.cos(rows * div)
    return pe.permute(1, 2, 0).reshape(grid_size * grid_size, d_model).float()


def elu_feature_map(x: torch.Tensor) -> torch.Tensor:
    return F.elu(x) + 1


def linear_attention(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """phi(Q) [phi(K)^T V] / (phi(Q) [phi(K)^T 1]) with phi = elu + 1.

    Accepts (L, D) or multi-head (N, L, H, D) inputs.
    """
    if queries.dim() == 2:
        return linear_attention(queries[None, :, None], keys[None, :, None], values[None, :, None], eps)[0, :, 0]
    if queries.shape[1] == 0 or keys.shape[1] == 0:
        raise ConfigurationError("linear attention needs non-empty sequences")
    q = elu_feature_map(queries)
    k = elu_feature_map(keys)
    kv = torch.einsum("nshd,nshv->nhdv", k, values)
    normalizer = 1 / (torch.einsum("nlhd,nhd->nlh", q, k.sum(dim=1)) + eps)
    return torch.einsum("nlhd,nhdv,nlh->nlhv", q, kv, normalizer)


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ConfigurationError(f"model width {d_model} not divisible by {n_heads} heads")
        self.dim = d_model // n_heads
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model, bias=False)
        self.k_proj = nn.Linear(d_model, d_model, bias=False)
        self.v_proj = nn.Linear(d_model, d_model, bias=False)
        self.merge = nn.Linear(d_model, d_model, bias=False)
        self.mlp = nn.Sequential(
            nn.Linear(d_model * 2, d_model * 2, bias=False),
            nn.ReLU(True),
            nn.Linear(d_model * 2, d_model, bias=False),
        )
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        b = x.size(0)
        query = self.q_proj(x).view(b, -1, self.n_heads, self.dim)
        key = self.k_proj(source).view(b, -1, self.n_heads, self.dim)
        value = self.v_proj(source).view(b, -1, self.n_heads, self.dim)
        message = linear_attention(query, key, value).reshape(b, -1, self.n_heads * self.dim)
        message = self.norm1(self.merge(message))
        message = self.norm2(self.mlp(torch.cat([x, message], dim=-1)))
        return x + message


class LocalFeatureTransformer(nn.Module):
    """Blocks of self attention on both streams followed by simultaneous cross attention."""

    def __init__(self, d_model: int = 96, n_heads: int = 4, n_blocks: int = 4):
        super().__init__()
        self.self_layers = nn.ModuleList([EncoderLayer(d_model, n_heads) for _ in range(n_blocks)])
        self.cross_layers = nn.ModuleList([EncoderLayer(d_model, n_heads) for _ in range(n_blocks)])

    def forward(self, feat_a: torch.Tensor, feat_b: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        for self_layer, cross_layer in zip(self.self_layers, self.cross_layers):
            feat_a, feat_b = self_layer(feat_a, feat_a), self_layer(feat_b, feat_b)
            feat_a, feat_b = cross_layer(feat_a, feat_b), cross_layer(feat_b, feat_a)
        return feat_a, feat_b


class Matcher(nn.Module):
    def __init__(self, in_channels: int, grid_size: int = 16, d_model: int = 96, n_heads: int = 4, n_blocks: int = 4):
        super().__init__()
        self.grid_size = grid_size
        self.in_proj = nn.Linear(in_channels, d_model)
        self.register_buffer("pos_encoding", positional_encoding(grid_size, d_model))
        self.transformer = LocalFeatureTransformer(d_model, n_heads, n_blocks)
        self.head = nn.Linear(d_model, HEAD_CHANNELS)

    def _tokens(self, grid: torch.Tensor) -> torch.Tensor:
        tokens = grid.flatten(2).transpose(1, 2)
        return self.in_proj(tokens) + self.pos_encoding

    def match_transform(self, feat_moving: MatchFeatures, feat_fixed: MatchFeatures) -> Tuple[TokenSequence, TokenSequence]:
        if feat_moving.grid.shape != feat_fixed.grid.shape:
            raise ConfigurationError(
                f"feature grids differ: {tuple(feat_moving.grid.shape)} vs {tuple(feat_fixed.grid.shape)}"
            )
        moving, fixed = self.transformer(self._tokens(feat_moving.grid), self._tokens(feat_fixed.grid))
        return TokenSequence(moving, "moving"), TokenSequence(fixed, "fixed")

    def head_raw(self, fixed_tokens: TokenSequence) -> torch.Tensor:
        return self.head(fixed_tokens.tokens)

    def output_head(self, fixed_tokens: TokenSequence) -> HeadOutput:
        return HeadOutput.from_raw(self.head_raw(fixed_tokens))


def score_matrix(
    seq_moving: Union[TokenSequence, torch.Tensor],
    seq_fixed: Union[TokenSequence, torch.Tensor],
    temperature: float,
) -> torch.Tensor:
    """S[i, j] = <a_i, b_j> / temperature; rows index moving tokens, columns fixed tokens."""
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    a = seq_moving.tokens if isinstance(seq_moving, TokenSequence) else seq_moving
    b = seq_fixed.tokens if isinstance(seq_fixed, TokenSequence) else seq_fixed
    return torch.einsum("...ld,...sd->...ls", a, b) / temperature
