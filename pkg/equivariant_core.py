"""
Rotation-equivariant building blocks over the cyclic group C_N.

Feature fields are stored channels-first as (batch, channels, height, width).
A regular field of multiplicity m occupies m * N channels laid out field-major
(channel = field * N + group element); a vector field occupies 2 * m channels
laid out as (x, y) pairs.

Convolution weights are never free pixels. Each kernel is a linear combination
of a steerable basis (a center delta plus Gaussian rings carrying angular
harmonics), so rotating a kernel is exact for every orientation of the group:
non quarter-turn orientations are obtained by rotating the basis analytically,
quarter turns by ``torch.rot90``. Equivariance under quarter turns therefore
holds on the pixel grid up to floating point error.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigurationError

logger = logging.getLogger(__name__)

RING_SIGMA = 0.6
MAX_FREQUENCY = 3

# (cos, sin) of k quarter turns, exact
_QUARTER_TURN_TRIG = ((1, 0), (0, 1), (-1, 0), (0, -1))


def check_group_order(group_order: int) -> int:
    if group_order < 4 or group_order % 4 != 0:
        raise ConfigurationError(f"group order must be >= 4 and divisible by 4, got {group_order}")
    return group_order


def check_kernel_size(kernel_size: int) -> int:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigurationError(f"kernel size must be a positive odd integer, got {kernel_size}")
    return kernel_size


class FieldKind(str, Enum):
    TRIVIAL = "trivial"
    REGULAR = "regular"
    VECTOR = "vector"


@dataclass(frozen=True)
class FieldType:
    """Representation attached to a feature field: kind, C_N order and number of fields."""

    kind: FieldKind
    group_order: int = 8
    multiplicity: int = 1

    def __post_init__(self):
        check_group_order(self.group_order)
        if self.multiplicity < 1:
            raise ConfigurationError(f"multiplicity must be >= 1, got {self.multiplicity}")

    @property
    def channels_per_field(self) -> int:
        if self.kind == FieldKind.TRIVIAL:
            return 1
        if self.kind == FieldKind.REGULAR:
            return self.group_order
        return 2

    @property
    def size(self) -> int:
        return self.multiplicity * self.channels_per_field


@dataclass
class FeatureField:
    """A (batch, C, H, W) tensor tagged with the field type that defines its rotation law."""

    tensor: torch.Tensor
    field_type: FieldType

    def __post_init__(self):
        if self.tensor.dim() != 4:
            raise ConfigurationError(f"feature field tensor must be 4-D (B, C, H, W), got shape {tuple(self.tensor.shape)}")
        if self.tensor.shape[1] != self.field_type.size:
            raise ConfigurationError(
                f"{self.field_type.kind.value} field with multiplicity {self.field_type.multiplicity} "
                f"needs {self.field_type.size} channels, got {self.tensor.shape[1]}"
            )

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.tensor).all())


def max_frequency(group_order: int) -> int:
    # frequencies that are multiples of 4 would change the DC response under non quarter-turn rotation
    return min(MAX_FREQUENCY, group_order // 2 - 1)


def steerable_basis(kernel_size: int, group_order: int, angle: float = 0.0) -> torch.Tensor:
    """Sample the steerable basis rotated by ``angle`` radians; returns (n_basis, k, k), unnormalized.

    Index 0 is the center delta. Rotation follows ``torch.rot90`` on the last two axes,
    i.e. ``angle = pi / 2`` reproduces ``torch.rot90(basis, 1, dims=(-2, -1))``.
    """
    check_kernel_size(kernel_size)
    half = kernel_size // 2
    coords = torch.arange(-half, half + 1, dtype=torch.float64)
    row, col = torch.meshgrid(coords, coords, indexing="ij")
    radius = torch.hypot(col, row)
    phi = torch.atan2(row, col) + angle
    off_center = (radius > 0).to(torch.float64)

    functions = [(radius == 0).to(torch.float64)]
    for ring in range(1, half + 1):
        profile = torch.exp(-((radius - ring) ** 2) / (2 * RING_SIGMA ** 2))
        functions.append(profile)
        for freq in range(1, max_frequency(group_order) + 1):
            functions.append(profile * off_center * torch.cos(freq * phi))
            functions.append(profile * off_center * torch.sin(freq * phi))
    return torch.stack(functions)


def oriented_basis_bank(kernel_size: int, group_order: int) -> torch.Tensor:
    """Basis for the orientations 2*pi*r/N, r < N/4, normalized with the unrotated norms.

    Returns (N // 4, n_basis, k, k).
    """
    quarter = group_order // 4
    upright = steerable_basis(kernel_size, group_order)
    norms = upright.flatten(1).norm(dim=1).clamp_min(1e-12)
    bank = [steerable_basis(kernel_size, group_order, 2 * math.pi * r / group_order) for r in range(quarter)]
    return torch.stack(bank) / norms.view(1, -1, 1, 1)


def _orient(base: torch.Tensor, group_element: int, quarter: int) -> torch.Tensor:
    quarter_turns, residual = divmod(group_element, quarter)
    return torch.rot90(base[residual], quarter_turns, dims=(-2, -1))


class LiftingKernel(nn.Module):
    """Steerable kernel mapping trivial fields to regular fields.

    ``weight`` has shape (out_fields, in_fields, n_basis); ``expanded()`` returns the
    (out_fields * N, in_fields, k, k) bank whose group channel g holds the kernel
    rotated by 2*pi*g/N.
    """

    def __init__(self, in_fields: int, out_fields: int, group_order: int = 8, kernel_size: int = 5):
        super().__init__()
        self.group_order = check_group_order(group_order)
        self.kernel_size = check_kernel_size(kernel_size)
        self.in_fields = in_fields
        self.out_fields = out_fields
        self.register_buffer("basis", oriented_basis_bank(kernel_size, group_order).float())
        n_basis = self.basis.shape[1]
        self.weight = nn.Parameter(torch.randn(out_fields, in_fields, n_basis) * math.sqrt(2.0 / (in_fields * n_basis)))

    def expanded(self) -> torch.Tensor:
        base = torch.einsum("oib,rbhw->roihw", self.weight, self.basis)
        quarter = self.group_order // 4
        bank = torch.stack([_orient(base, g, quarter) for g in range(self.group_order)], dim=1)
        k = self.kernel_size
        return bank.reshape(self.out_fields * self.group_order, self.in_fields, k, k)


class RegularKernel(nn.Module):
    """Steerable kernel between regular fields.

    ``weight`` has shape (out_fields, in_fields, N, n_basis) where the third axis is the
    relative group offset between input and output channel. Output group channel h
    uses the base kernel rotated by h and cyclically shifted by h over the input
    group channels.
    """

    def __init__(self, in_fields: int, out_fields: int, group_order: int = 8, kernel_size: int = 3):
        super().__init__()
        self.group_order = check_group_order(group_order)
        self.kernel_size = check_kernel_size(kernel_size)
        self.in_fields = in_fields
        self.out_fields = out_fields
        self.register_buffer("basis", oriented_basis_bank(kernel_size, group_order).float())
        n_basis = self.basis.shape[1]
        fan_in = in_fields * group_order * n_basis
        self.weight = nn.Parameter(torch.randn(out_fields, in_fields, group_order, n_basis) * math.sqrt(2.0 / fan_in))

    def expanded(self) -> torch.Tensor:
        n = self.group_order
        base = torch.einsum("oinb,rbhw->roinhw", self.weight, self.basis)
        quarter = n // 4
        bank = torch.stack(
            [torch.roll(_orient(base, h, quarter), shifts=h, dims=2) for h in range(n)],
            dim=1,
        )
        k = self.kernel_size
        return bank.reshape(self.out_fields * n, self.in_fields * n, k, k)


def _check_stride(x: torch.Tensor, stride: int) -> None:
    if stride not in (1, 2):
        raise ConfigurationError(f"stride must be 1 or 2, got {stride}")
    if stride == 2 and (x.shape[-1] % 2 or x.shape[-2] % 2):
        raise ConfigurationError(f"stride 2 needs even spatial size, got {tuple(x.shape[-2:])}")


def steerable_conv2d(x: torch.Tensor, weight: torch.Tensor, stride: int = 1) -> torch.Tensor:
    """Reflect-padded 'same' convolution; stride 2 is a 2x2 average pool after the convolution.

    Pooling whole 2x2 cells keeps quarter-turn equivariance exact on even grids,
    which a strided convolution does not.
    """
    _check_stride(x, stride)
    pad = weight.shape[-1] // 2
    if pad:
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    out = F.conv2d(x, weight)
    if stride == 2:
        out = F.avg_pool2d(out, 2)
    return out


def _check_compatible(x: FeatureField, kind: FieldKind, kernel, in_size: int) -> None:
    if x.field_type.kind != kind:
        raise ConfigurationError(f"expected a {kind.value} field, got {x.field_type.kind.value}")
    if x.field_type.group_order != kernel.group_order:
        raise ConfigurationError(
            f"group order mismatch: field C_{x.field_type.group_order}, kernel C_{kernel.group_order}"
        )
    if x.field_type.multiplicity != in_size:
        raise ConfigurationError(f"kernel expects {in_size} input fields, got {x.field_type.multiplicity}")


def lift_conv(x: FeatureField, kernel: LiftingKernel, stride: int = 1) -> FeatureField:
    _check_compatible(x, FieldKind.TRIVIAL, kernel, kernel.in_fields)
    out = steerable_conv2d(x.tensor, kernel.expanded(), stride)
    return FeatureField(out, FieldType(FieldKind.REGULAR, kernel.group_order, kernel.out_fields))


def regular_conv(x: FeatureField, kernel: RegularKernel, stride: int = 1) -> FeatureField:
    _check_compatible(x, FieldKind.REGULAR, kernel, kernel.in_fields)
    out = steerable_conv2d(x.tensor, kernel.expanded(), stride)
    return FeatureField(out, FieldType(FieldKind.REGULAR, kernel.group_order, kernel.out_fields))


def regular_to_vector_tensor(x: torch.Tensor, group_order: int) -> torch.Tensor:
    """Frequency-1 DFT over the group channels of every regular field: (B, m*N, H, W) -> (B, 2m, H, W)."""
    b, c, h, w = x.shape
    fields = x.reshape(b, c // group_order, group_order, h, w)
    angles = 2 * math.pi * torch.arange(group_order, dtype=x.dtype, device=x.device) / group_order
    real = torch.einsum("bmghw,g->bmhw", fields, torch.cos(angles))
    imag = torch.einsum("bmghw,g->bmhw", fields, torch.sin(angles))
    return torch.stack([real, imag], dim=2).reshape(b, 2 * (c // group_order), h, w)


def regular_to_vector(x: FeatureField) -> FeatureField:
    if x.field_type.kind != FieldKind.REGULAR:
        raise ConfigurationError(f"expected a regular field, got {x.field_type.kind.value}")
    ft = x.field_type
    out = regular_to_vector_tensor(x.tensor, ft.group_order)
    return FeatureField(out, FieldType(FieldKind.VECTOR, ft.group_order, ft.multiplicity))


def rotate_tensor(x: torch.Tensor, field_type: FieldType, quarter_turns: int) -> torch.Tensor:
    """Group action of ``quarter_turns`` quarter turns on a (..., C, H, W) tensor of the given type."""
    if x.shape[-1] != x.shape[-2]:
        raise ConfigurationError(f"rotation needs a square field, got {tuple(x.shape[-2:])}")
    turns = quarter_turns % 4
    if turns == 0:
        return x.clone()
    out = torch.rot90(x, turns, dims=(-2, -1))
    lead, (c, h, w) = out.shape[:-3], out.shape[-3:]
    if field_type.kind == FieldKind.REGULAR:
        n = field_type.group_order
        out = out.reshape(*lead, c // n, n, h, w)
        out = torch.roll(out, shifts=turns * n // 4, dims=-3).reshape(*lead, c, h, w)
    elif field_type.kind == FieldKind.VECTOR:
        cos, sin = _QUARTER_TURN_TRIG[turns]
        pairs = out.reshape(*lead, c // 2, 2, h, w)
        x_part, y_part = pairs.unbind(dim=-3)
        out = torch.stack([cos * x_part - sin * y_part, sin * x_part + cos * y_part], dim=-3).reshape(*lead, c, h, w)
    return out


def rotate_field(x: FeatureField, quarter_turns: int) -> FeatureField:
    return FeatureField(rotate_tensor(x.tensor, x.field_type, quarter_turns), x.field_type)


class LiftConv(nn.Module):
    def __init__(self, in_fields: int, out_fields: int, group_order: int = 8, kernel_size: int = 5, stride: int = 1):
        super().__init__()
        self.kernel = LiftingKernel(in_fields, out_fields, group_order, kernel_size)
        self.stride = stride

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return steerable_conv2d(x, self.kernel.expanded(), self.stride)


class RegularConv(nn.Module):
    def __init__(self, in_fields: int, out_fields: int, group_order: int = 8, kernel_size: int = 3, stride: int = 1):
        super().__init__()
        self.kernel = RegularKernel(in_fields, out_fields, group_order, kernel_size)
        self.stride = stride

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return steerable_conv2d(x, self.kernel.expanded(), self.stride)


class InnerRMSNorm(nn.Module):
    """Per-field RMS normalization with statistics shared across the N group channels.

    No centering and no bias, so zero fields stay zero. Eval mode uses running
    statistics and is a per-channel scaling.
    """

    def __init__(self, num_fields: int, group_order: int = 8, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.num_fields = num_fields
        self.group_order = group_order
        self.momentum = momentum
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(num_fields))
        self.register_buffer("running_ms", torch.ones(num_fields))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        fields = x.reshape(b, self.num_fields, self.group_order, h, w)
        if self.training:
            mean_square = fields.pow(2).mean(dim=(0, 2, 3, 4))
            with torch.no_grad():
                self.running_ms.mul_(1 - self.momentum).add_(self.momentum * mean_square.detach())
        else:
            mean_square = self.running_ms
        scale = self.gain / torch.sqrt(mean_square + self.eps)
        return (fields * scale.view(1, -1, 1, 1, 1)).reshape(b, c, h, w)


class NormNonlinearity(nn.Module):
    """Vector-field nonlinearity: v * relu(|v| - b) / |v|, one learnable threshold b >= 0 per field.

    Starts at b = 0, where it passes every vector through unchanged.
    """

    def __init__(self, num_fields: int):
        super().__init__()
        self.threshold = nn.Parameter(torch.zeros(num_fields))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        pairs = x.reshape(b, c // 2, 2, h, w)
        norm = pairs.norm(dim=2, keepdim=True)
        threshold = self.threshold.clamp_min(0.0).view(1, -1, 1, 1, 1)
        gate = F.relu(norm - threshold) / norm.clamp_min(1e-12)
        gate = torch.where(norm > 0, gate, torch.zeros_like(gate))
        return (pairs * gate).reshape(b, c, h, w)


def equivariance_residual(
    layer: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    in_type: FieldType,
    out_type: FieldType,
    quarter_turns: int,
) -> float:
    """max |layer(g.x) - g.layer(x)| for g = ``quarter_turns`` quarter turns."""
    with torch.no_grad():
        lhs = layer(rotate_tensor(x, in_type, quarter_turns))
        rhs = rotate_tensor(layer(x), out_type, quarter_turns)
    return float((lhs - rhs).abs().max())
