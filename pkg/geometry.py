"""
Similarity transforms, patch-grid bookkeeping and global transform estimation.

Coordinates: x to the right, y down, origin at the top-left pixel corner, pixel
centers at half-integers. A transform maps p -> s R(theta) (p - c) + c + t with
R(theta) = [[cos, -sin], [sin, cos]].
"""

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from errors import ConfigurationError, DegenerateEstimateError, NoSolutionError

if TYPE_CHECKING:
    from assignment import MatchSet

logger = logging.getLogger(__name__)

SCALE_BASE = 1.5
RECORD_FIELDS = ("theta", "scale", "tx", "ty", "cx", "cy")


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    wrapped = math.remainder(theta, 2 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


@dataclass(frozen=True)
class SimilarityTransform:
    theta: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        values = [self.theta, self.scale, self.tx, self.ty, self.cx, self.cy]
        if not all(math.isfinite(v) for v in values):
            raise ConfigurationError(f"transform parameters must be finite, got {values}")
        if self.scale <= 0:
            raise ConfigurationError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def identity(cls, center: Tuple[float, float] = (0.0, 0.0)) -> "SimilarityTransform":
        return cls(cx=center[0], cy=center[1])

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def linear(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return self.scale * np.array([[c, -s], [s, c]])

    def to_matrix(self) -> np.ndarray:
        """2 x 3 row-major matrix acting on homogeneous (x, y, 1)."""
        a = self.linear()
        offset = self.center + self.translation - a @ self.center
        return np.hstack([a, offset[:, None]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        matrix = self.to_matrix()
        return pts @ matrix[:, :2].T + matrix[:, 2]

    def invert(self) -> "SimilarityTransform":
        inv_linear = SimilarityTransform(-self.theta, 1.0 / self.scale).linear()
        t = -inv_linear @ self.translation
        return SimilarityTransform(-self.theta, 1.0 / self.scale, t[0], t[1], self.cx, self.cy)

    def compose(self, inner: "SimilarityTransform") -> "SimilarityTransform":
        """self after inner, expressed about the inner transform's center."""
        matrix = homogeneous(self.to_matrix()) @ homogeneous(inner.to_matrix())
        return SimilarityTransform.from_matrix(matrix[:2], (inner.cx, inner.cy))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, center: Tuple[float, float] = (0.0, 0.0)) -> "SimilarityTransform":
        matrix = np.asarray(matrix, dtype=np.float64)
        a, b = matrix[0, 0], matrix[1, 0]
        if not np.allclose(matrix[:, :2], [[a, -b], [b, a]], atol=1e-9 * max(1.0, math.hypot(a, b))):
            raise ConfigurationError("matrix is not a similarity transform")
        scale = math.hypot(a, b)
        linear = matrix[:, :2]
        c = np.asarray(center, dtype=np.float64)
        t = matrix[:, 2] - c + linear @ c
        return cls(math.atan2(b, a), scale, t[0], t[1], c[0], c[1])

    def to_record(self) -> str:
        return " ".join(format(getattr(self, name), ".17g") for name in RECORD_FIELDS)

    @classmethod
    def from_record(cls, record: str) -> "SimilarityTransform":
        parts = record.split()
        if len(parts) != len(RECORD_FIELDS):
            raise ConfigurationError(f"transform record needs {len(RECORD_FIELDS)} fields, got {record!r}")
        return cls(*(float(p) for p in parts))

    def is_close(self, other: "SimilarityTransform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.to_matrix(), other.to_matrix(), atol=atol, rtol=0))


def homogeneous(matrix: np.ndarray) -> np.ndarray:
    return np.vstack([matrix, [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PatchGrid:
    grid_size: int = 16
    patch_px: int = 16
    image_size: int = 256

    def __post_init__(self):
        if self.grid_size <= 0 or self.patch_px <= 0:
            raise ConfigurationError(f"invalid patch grid {self}")
        if self.image_size != self.grid_size * self.patch_px:
            raise ConfigurationError(
                f"image size {self.image_size} != {self.grid_size} patches x {self.patch_px} px"
            )

    @classmethod
    def for_image(cls, image_size: int, grid_size: int) -> "PatchGrid":
        return cls(grid_size, image_size // grid_size, image_size)

    @property
    def n_patches(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def image_center(self) -> Tuple[float, float]:
        return self.image_size / 2.0, self.image_size / 2.0

    def patch_centers(self) -> np.ndarray:
        """(S*S, 2) centers in row-major token order."""
        index = np.arange(self.n_patches)
        half = self.patch_px / 2.0
        return np.stack([(index % self.grid_size) * self.patch_px + half,
                         (index // self.grid_size) * self.patch_px + half], axis=1).astype(np.float64)

    def patch_index(self, point) -> int:
        """Index of the patch containing (x, y), -1 outside the image."""
        x, y = float(point[0]), float(point[1])
        if not (0.0 <= x < self.image_size and 0.0 <= y < self.image_size):
            return -1
        return int(y // self.patch_px) * self.grid_size + int(x // self.patch_px)


def patch_center(index: int, grid: PatchGrid) -> Tuple[float, float]:
    if not 0 <= index < grid.n_patches:
        raise ConfigurationError(f"patch index {index} outside 0..{grid.n_patches - 1}")
    half = grid.patch_px / 2.0
    return (index % grid.grid_size) * grid.patch_px + half, (index // grid.grid_size) * grid.patch_px + half


def _weighted_centroid(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return (weights[:, None] * points).sum(axis=0) / weights.sum()


def estimate_from_params(
    matches: "MatchSet",
    grid: PatchGrid,
    scale_enabled: bool = True,
    refine_enabled: bool = True,
) -> SimilarityTransform:
    """Aggregate per-match angle and scale predictions into one transform about the image center.

    The angle is the confidence-weighted circular mean, the scale 1.5 to the
    weighted mean exponent. Translation maps the weighted centroid of moving
    patch centers onto the weighted centroid of the fixed coordinates.
    """
    if len(matches) == 0:
        raise NoSolutionError("no matches to estimate a transform from")
    w = np.asarray(matches.confidence, dtype=np.float64)
    sin_sum = float(np.sum(w * matches.sin))
    cos_sum = float(np.sum(w * matches.cos))
    if math.hypot(sin_sum, cos_sum) <= 1e-12 * w.sum():
        raise DegenerateEstimateError("per-match angles cancel out")
    theta = math.atan2(sin_sum, cos_sum)
    scale = SCALE_BASE ** float(np.sum(w * matches.scale_exponent) / w.sum()) if scale_enabled else 1.0

    src = _weighted_centroid(matches.moving_xy, w)
    dst = _weighted_centroid(matches.fixed_xy if refine_enabled else matches.fixed_center_xy, w)
    center = np.array(grid.image_center)
    linear = SimilarityTransform(theta, scale).linear()
    t = dst - center - linear @ (src - center)
    return SimilarityTransform(theta, scale, t[0], t[1], center[0], center[1])


def estimate_procrustes(
    src,
    dst,
    weights: Optional[Sequence[float]] = None,
    scale_enabled: bool = True,
    center: Tuple[float, float] = (0.0, 0.0),
) -> SimilarityTransform:
    """Weighted least-squares similarity alignment of src onto dst (closed form, 2-D)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ConfigurationError(f"point sets differ in shape: {src.shape} vs {dst.shape}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ConfigurationError("weights must be non-negative")
    if np.count_nonzero(w > 0) < 2:
        raise DegenerateEstimateError("at least two weighted correspondences are required")

    mu_src = _weighted_centroid(src, w)
    mu_dst = _weighted_centroid(dst, w)
    xs = src - mu_src
    yd = dst - mu_dst
    var = float(np.sum(w * np.sum(xs * xs, axis=1)))
    if var <= 1e-12 * max(1.0, float(np.sum(w * np.sum(src * src, axis=1)))):
        raise DegenerateEstimateError("moving points are coincident")
    a = float(np.sum(w * np.sum(xs * yd, axis=1)))
    b = float(np.sum(w * (xs[:, 0] * yd[:, 1] - xs[:, 1] * yd[:, 0])))
    theta = math.atan2(b, a)
    scale = math.hypot(a, b) / var if scale_enabled else 1.0

    c = np.asarray(center, dtype=np.float64)
    linear = SimilarityTransform(theta, scale).linear()
    t = mu_dst - c - linear @ (mu_src - c)
    return SimilarityTransform(theta, scale, t[0], t[1], c[0], c[1])


def index_matrix(matrix: np.ndarray) -> np.ndarray:
    """Convert a corner-origin 2 x 3 matrix to pixel-index coordinates (cv2 convention)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    converted = matrix.copy()
    converted[:, 2] = matrix[:, 2] + matrix[:, :2] @ np.array([0.5, 0.5]) - 0.5
    return converted


def warp_affine(image: np.ndarray, matrix: np.ndarray, out_shape: Tuple[int, int], border_value: float = 0.0) -> np.ndarray:
    """Inverse-map bilinear warp: out(p) = image(M^-1 p) for a corner-origin 2 x 3 matrix M."""
    inverse = np.linalg.inv(homogeneous(np.asarray(matrix, dtype=np.float64)))[:2]
    src = np.asarray(image, dtype=np.float32)
    return cv2.warpAffine(
        src,
        index_matrix(inverse),
        (int(out_shape[1]), int(out_shape[0])),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=border_value,
    )


def warp_image(image: np.ndarray, transform: Union[SimilarityTransform, np.ndarray], out_shape=None) -> np.ndarray:
    """Resample ``image`` into the frame ``transform`` maps it to."""
    matrix = transform.to_matrix() if isinstance(transform, SimilarityTransform) else transform
    return warp_affine(image, matrix, out_shape or np.shape(image)[:2])


def rotate_image(image: np.ndarray, quarter_turns: int) -> Tuple[np.ndarray, SimilarityTransform]:
    """Exact rotation of a square image by quarter_turns * 90 degrees about its center."""
    h, w = np.shape(image)[:2]
    if h != w:
        raise ConfigurationError(f"quarter-turn rotation needs a square image, got {h}x{w}")
    q = quarter_turns % 4
    # positive theta turns the x axis towards +y, which is np.rot90 with negative k
    rotated = np.ascontiguousarray(np.rot90(image, k=-q))
    return rotated, SimilarityTransform(q * math.pi / 2, 1.0, 0.0, 0.0, w / 2.0, h / 2.0)
