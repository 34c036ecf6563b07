"""
Synthetic training pairs with exact ground truth.

A foreground sprite (cropped from a raw image or synthesized as a textured
blob) is placed at a random pose in the moving frame. A random similarity
transform about the image center gives the pose in the fixed frame. Both frames
are rendered by inverse bilinear warping, and the patch-level assignment and
sub-patch refinement targets are derived from the transform itself.
"""

import json
import logging
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
from pydantic import BaseModel, Field
from torch.utils.data import Dataset
from tqdm import tqdm

from errors import ConfigurationError, EmptyForegroundError, PoseSamplingError
from geometry import PatchGrid, SimilarityTransform, homogeneous, warp_affine

logger = logging.getLogger(__name__)

F_MIN = 0.3
INDEX_FILE = "index.json"
THRESHOLD_FLAGS = {"otsu": cv2.THRESH_OTSU, "triangle": cv2.THRESH_TRIANGLE}


@dataclass
class Sprite:
    intensity: np.ndarray  # (h, w) in [0, 1], zero outside the mask
    mask: np.ndarray  # (h, w) bool

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        intensity = np.asarray(self.intensity, dtype=np.float64)
        if intensity.shape != self.mask.shape:
            raise ConfigurationError(f"sprite intensity {intensity.shape} and mask {self.mask.shape} differ")
        if not self.mask.any():
            raise EmptyForegroundError("sprite mask is empty")
        self.intensity = np.where(self.mask, intensity, 0.0)

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def centroid(self) -> np.ndarray:
        ys, xs = np.nonzero(self.mask)
        return np.array([xs.mean() + 0.5, ys.mean() + 0.5])

    def radius(self) -> float:
        """Distance from the centroid to the farthest mask pixel corner, plus one pixel of resampling spread."""
        ys, xs = np.nonzero(self.mask)
        cx, cy = self.centroid()
        return float(np.max(np.hypot(xs + 0.5 - cx, ys + 0.5 - cy)) + math.sqrt(0.5) + 1.0)


class SynthesisRanges(BaseModel):
    image_size: int = Field(256, gt=0)
    scale_range: float = Field(1.15, ge=1.0)
    scale_enabled: bool = True
    noise_std: float = Field(0.02, ge=0.0)
    background: float = Field(0.1, ge=0.0, le=1.0)
    margin: float = Field(2.0, ge=0.0)
    max_retries: int = Field(100, ge=1)


@dataclass
class TrainingSample:
    moving: np.ndarray
    fixed: np.ndarray
    gt_transform: SimilarityTransform  # moving -> fixed
    gt_assignment: np.ndarray  # (L+1, L+1), last row/column are dustbins
    gt_refine: np.ndarray  # (L, 2) per fixed patch, patch units
    fg_mask_moving: np.ndarray
    fg_mask_fixed: np.ndarray
    moving_pose: Optional[SimilarityTransform] = None

    @property
    def gt_matched(self) -> np.ndarray:
        """Fixed patches that have a real (non-dustbin) target."""
        return self.gt_assignment[:-1, :-1].any(axis=0)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def foreground_mask(raw: np.ndarray, threshold_method: str = "otsu") -> Tuple[np.ndarray, np.ndarray, Tuple[int, int, int, int]]:
    """Global threshold and largest connected component.

    Returns the image rescaled to [0, 1], the full-size component mask and its
    bounding box (x, y, w, h).
    """
    image = np.asarray(raw, dtype=np.float64)
    if image.ndim != 2:
        raise ConfigurationError(f"raw image must be single-channel, got shape {image.shape}")
    if threshold_method not in THRESHOLD_FLAGS:
        raise ConfigurationError(f"unknown threshold method {threshold_method!r}")
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        raise EmptyForegroundError("uniform image has no foreground")

    normalized = (image - lo) / (hi - lo)
    gray = np.round(normalized * 255).astype(np.uint8)
    _, binary = cv2.threshold(gray, 0, 1, cv2.THRESH_BINARY + THRESHOLD_FLAGS[threshold_method])
    n_labels, labels, stats, _ = cv2.connectedComponentsWithStats(binary, connectivity=8)
    if n_labels <= 1:
        raise EmptyForegroundError("threshold left no foreground pixels")

    largest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    box = tuple(int(v) for v in stats[largest, :4])
    logger.debug(f"Foreground component of {stats[largest, cv2.CC_STAT_AREA]} px at {box}")
    return normalized, labels == largest, box


def crop_foreground(raw: np.ndarray, threshold_method: str = "otsu") -> Sprite:
    """Isolate the largest foreground component and crop to its bounding box."""
    normalized, mask, (x, y, w, h) = foreground_mask(raw, threshold_method)
    return Sprite(normalized[y:y + h, x:x + w], mask[y:y + h, x:x + w])


def synth_blob(
    rng: np.random.Generator,
    area_range: Tuple[float, float] = (1500.0, 4000.0),
    n_harmonics: int = 4,
    max_amplitude: float = 0.35,
    texture_sigma: float = 2.0,
) -> Sprite:
    """Smooth star-convex blob with a blurred-noise interior texture."""
    lo, hi = area_range
    if not 0 < lo <= hi:
        raise ConfigurationError(f"invalid area range {area_range}")
    target = rng.uniform(lo, hi)
    amplitudes = rng.uniform(0.0, 1.0, n_harmonics) / np.arange(1, n_harmonics + 1)
    amplitudes *= max_amplitude / amplitudes.sum()
    phases = rng.uniform(0.0, 2 * np.pi, n_harmonics)

    phi = np.linspace(0.0, 2 * np.pi, 180, endpoint=False)
    harmonics = np.arange(2, n_harmonics + 2)
    profile = 1.0 + (amplitudes[:, None] * np.cos(harmonics[:, None] * phi + phases[:, None])).sum(axis=0)
    r0 = math.sqrt(target / (np.pi * np.mean(profile ** 2)))

    for _ in range(10):
        radius = r0 * profile
        half = int(math.ceil(radius.max())) + 2
        points = np.stack([half + radius * np.cos(phi), half + radius * np.sin(phi)], axis=1)
        mask = np.zeros((2 * half, 2 * half), dtype=np.uint8)
        cv2.fillPoly(mask, [np.round(points * 16).astype(np.int32)], 1, lineType=cv2.LINE_8, shift=4)
        area = int(mask.sum())
        if lo <= area <= hi:
            break
        r0 *= math.sqrt(target / max(area, 1))

    texture = cv2.GaussianBlur(rng.standard_normal(mask.shape), (0, 0), sigmaX=texture_sigma)
    inside = texture[mask > 0]
    texture = 0.35 + 0.65 * (texture - inside.min()) / max(inside.max() - inside.min(), 1e-12)
    return Sprite(texture, mask > 0)


def sample_poses(sprite: Sprite, ranges: SynthesisRanges, rng: np.random.Generator) -> Tuple[SimilarityTransform, SimilarityTransform]:
    """Random moving-frame pose of the sprite and a moving -> fixed transform keeping it inside both frames."""
    size = ranges.image_size
    center = size / 2.0
    g = sprite.centroid()
    r = sprite.radius()
    log_range = math.log(ranges.scale_range)
    for _ in range(ranges.max_retries):
        phi = np.pi - rng.uniform(0.0, 2 * np.pi)
        theta = np.pi - rng.uniform(0.0, 2 * np.pi)
        scale = math.exp(rng.uniform(-log_range, log_range)) if ranges.scale_enabled else 1.0
        lo_m, hi_m = r + ranges.margin, size - r - ranges.margin
        lo_f, hi_f = r * scale + ranges.margin, size - r * scale - ranges.margin
        if lo_m > hi_m or lo_f > hi_f:
            continue
        p = rng.uniform(lo_m, hi_m, 2)
        q = rng.uniform(lo_f, hi_f, 2)
        moving_pose = SimilarityTransform(phi, 1.0, p[0] - g[0], p[1] - g[1], g[0], g[1])
        t = q - center - SimilarityTransform(theta, scale).linear() @ (p - center)
        return moving_pose, SimilarityTransform(theta, scale, t[0], t[1], center, center)
    raise PoseSamplingError(f"sprite of radius {r:.1f} px does not fit a {size} px frame after {ranges.max_retries} draws")


def render_frame(
    sprite: Sprite,
    matrix: np.ndarray,
    ranges: SynthesisRanges,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    size = (ranges.image_size, ranges.image_size)
    warped = warp_affine(sprite.intensity, matrix, size)
    cover = warp_affine(sprite.mask.astype(np.float32), matrix, size)
    image = warped + ranges.background * (1.0 - cover)
    if ranges.noise_std > 0:
        image = image + rng.normal(0.0, ranges.noise_std, size)
    return np.clip(image, 0.0, 1.0).astype(np.float32), cover > 0.5


def gt_matching_map(
    transform: SimilarityTransform,
    fg_mask_moving: np.ndarray,
    grid: PatchGrid,
    f_min: float = F_MIN,
) -> Tuple[np.ndarray, np.ndarray]:
    """Dustbin-augmented assignment target and per-fixed-patch refinement offsets.

    Foreground moving patches map to the fixed patch containing the transformed
    center; when several land in one fixed patch the nearest to its center wins.
    """
    mask = np.asarray(fg_mask_moving, dtype=np.float64)
    if mask.shape != (grid.image_size, grid.image_size):
        raise ConfigurationError(f"mask shape {mask.shape} does not match the {grid.image_size} px grid")
    s, p = grid.grid_size, grid.patch_px
    fraction = mask.reshape(s, p, s, p).mean(axis=(1, 3)).ravel()
    centers = grid.patch_centers()
    n = grid.n_patches

    owner = np.full(n, -1)
    best = np.full(n, np.inf)
    targets: Dict[int, np.ndarray] = {}
    for i in np.flatnonzero(fraction >= f_min):
        q = transform.apply(centers[i])
        j = grid.patch_index(q)
        if j < 0:
            continue
        distance = float(np.hypot(*(q - centers[j])))
        if distance < best[j]:
            best[j] = distance
            owner[j] = i
        targets[i] = q

    gt_assignment = np.zeros((n + 1, n + 1), dtype=np.float32)
    gt_refine = np.zeros((n, 2), dtype=np.float64)
    for j in np.flatnonzero(owner >= 0):
        i = owner[j]
        gt_assignment[i, j] = 1.0
        gt_refine[j] = (targets[i] - centers[j]) / p
    gt_assignment[np.flatnonzero(gt_assignment[:n, :n].sum(axis=1) == 0), n] = 1.0
    gt_assignment[n, np.flatnonzero(gt_assignment[:n, :n].sum(axis=0) == 0)] = 1.0
    return gt_assignment, gt_refine


def render_pair(
    sprite: Sprite,
    moving_pose: SimilarityTransform,
    transform: SimilarityTransform,
    ranges: SynthesisRanges,
    rng: np.random.Generator,
    grid: Optional[PatchGrid] = None,
    f_min: float = F_MIN,
) -> TrainingSample:
    grid = grid or PatchGrid.for_image(ranges.image_size, 16)
    moving_matrix = moving_pose.to_matrix()
    fixed_matrix = (homogeneous(transform.to_matrix()) @ homogeneous(moving_matrix))[:2]
    moving, moving_mask = render_frame(sprite, moving_matrix, ranges, rng)
    fixed, fixed_mask = render_frame(sprite, fixed_matrix, ranges, rng)
    gt_assignment, gt_refine = gt_matching_map(transform, moving_mask, grid, f_min)
    return TrainingSample(moving, fixed, transform, gt_assignment, gt_refine, moving_mask, fixed_mask, moving_pose)


def synth_pair(
    sprite: Sprite,
    ranges: SynthesisRanges,
    rng: np.random.Generator,
    grid: Optional[PatchGrid] = None,
    f_min: float = F_MIN,
) -> TrainingSample:
    moving_pose, transform = sample_poses(sprite, ranges, rng)
    return render_pair(sprite, moving_pose, transform, ranges, rng, grid, f_min)


def load_sprites(directory) -> List[Sprite]:
    """Crop one sprite from every readable image in ``directory``."""
    sprites = []
    for path in sorted(Path(directory).iterdir()):
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            continue
        if raw.ndim == 3:
            raw = cv2.cvtColor(raw, cv2.COLOR_BGR2GRAY)
        try:
            sprites.append(crop_foreground(raw))
        except EmptyForegroundError as e:
            logger.warning(f"Skipping {path.name}: {e}")
    if not sprites:
        raise EmptyForegroundError(f"no usable sprites in {directory}")
    logger.info(f"Loaded {len(sprites)} sprites from {directory}")
    return sprites


def _sample_paths(root: Path, index: int) -> Dict[str, Path]:
    stem = f"{index:05d}"
    return {
        "moving": root / f"{stem}_moving.png",
        "fixed": root / f"{stem}_fixed.png",
        "moving_mask": root / f"{stem}_moving_mask.png",
        "fixed_mask": root / f"{stem}_fixed_mask.png",
        "meta": root / f"{stem}_meta.txt",
    }


def save_sample(root: Path, index: int, seed: int, sample: TrainingSample) -> None:
    paths = _sample_paths(root, index)
    cv2.imwrite(str(paths["moving"]), np.round(sample.moving * 65535).astype(np.uint16))
    cv2.imwrite(str(paths["fixed"]), np.round(sample.fixed * 65535).astype(np.uint16))
    cv2.imwrite(str(paths["moving_mask"]), sample.fg_mask_moving.astype(np.uint8) * 255)
    cv2.imwrite(str(paths["fixed_mask"]), sample.fg_mask_fixed.astype(np.uint8) * 255)
    paths["meta"].write_text(f"{seed} {index} {sample.gt_transform.to_record()}\n")


def write_dataset(
    out_dir,
    n: int,
    seed: int = 0,
    ranges: Optional[SynthesisRanges] = None,
    grid_size: int = 16,
    f_min: float = F_MIN,
    sprites: Optional[Sequence[Sprite]] = None,
    progress: bool = True,
) -> Path:
    """Write ``n`` pairs; sample i depends only on (seed, i)."""
    ranges = ranges or SynthesisRanges()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    grid = PatchGrid.for_image(ranges.image_size, grid_size)
    for i in tqdm(range(n), desc="Synthesizing pairs", disable=not progress):
        rng = sample_rng(seed, i)
        sprite = sprites[int(rng.integers(len(sprites)))] if sprites else synth_blob(rng)
        save_sample(root, i, seed, synth_pair(sprite, ranges, rng, grid, f_min))

    index = {
        "count": n,
        "seed": seed,
        "grid_size": grid_size,
        "f_min": f_min,
        "ranges": ranges.model_dump(),
        "sprite_source": "raw crops" if sprites else "synthetic blobs",
        "created": datetime.now().isoformat(),
    }
    (root / INDEX_FILE).write_text(json.dumps(index, indent=2))
    logger.info(f"Wrote {n} synthetic pairs to {root}")
    return root


def read_index(root) -> dict:
    path = Path(root) / INDEX_FILE
    if not path.exists():
        raise FileNotFoundError(f"no dataset index at {path}")
    return json.loads(path.read_text())


def _read_image(path: Path) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return image


def load_sample(root, index: int, dataset_index: Optional[dict] = None) -> TrainingSample:
    """Read one stored pair and regenerate its ground-truth maps from the metadata record."""
    root = Path(root)
    info = dataset_index or read_index(root)
    paths = _sample_paths(root, index)
    if not paths["meta"].exists():
        raise FileNotFoundError(f"missing metadata {paths['meta']}")
    fields = paths["meta"].read_text().split()
    transform = SimilarityTransform.from_record(" ".join(fields[2:]))

    moving = _read_image(paths["moving"]).astype(np.float32) / 65535.0
    fixed = _read_image(paths["fixed"]).astype(np.float32) / 65535.0
    moving_mask = _read_image(paths["moving_mask"]) > 127
    fixed_mask = _read_image(paths["fixed_mask"]) > 127
    grid = PatchGrid.for_image(moving.shape[0], info["grid_size"])
    gt_assignment, gt_refine = gt_matching_map(transform, moving_mask, grid, info["f_min"])
    return TrainingSample(moving, fixed, transform, gt_assignment, gt_refine, moving_mask, fixed_mask)


def sample_to_tensors(sample: TrainingSample) -> Dict[str, torch.Tensor]:
    return {
        "moving": torch.from_numpy(np.asarray(sample.moving, dtype=np.float32))[None],
        "fixed": torch.from_numpy(np.asarray(sample.fixed, dtype=np.float32))[None],
        "fg_mask_moving": torch.from_numpy(np.asarray(sample.fg_mask_moving, dtype=bool)),
        "fg_mask_fixed": torch.from_numpy(np.asarray(sample.fg_mask_fixed, dtype=bool)),
        "gt_assignment": torch.from_numpy(np.asarray(sample.gt_assignment, dtype=np.float32)),
        "gt_refine": torch.from_numpy(np.asarray(sample.gt_refine, dtype=np.float32)),
        "gt_matched": torch.from_numpy(sample.gt_matched),
        "gt_theta": torch.tensor(sample.gt_transform.theta, dtype=torch.float32),
        "gt_scale": torch.tensor(sample.gt_transform.scale, dtype=torch.float32),
    }


class RegistrationDataset(Dataset):
    """Training pairs read lazily from a dataset directory, or held in memory."""

    def __init__(self, root=None, samples: Optional[Sequence[TrainingSample]] = None):
        if (root is None) == (samples is None):
            raise ConfigurationError("pass exactly one of a dataset directory or in-memory samples")
        self.root = Path(root) if root is not None else None
        self.samples = list(samples) if samples is not None else None
        self.index = read_index(self.root) if self.root is not None else None

    def __len__(self) -> int:
        return len(self.samples) if self.samples is not None else int(self.index["count"])

    def get_sample(self, i: int) -> TrainingSample:
        if self.samples is not None:
            return self.samples[i]
        return load_sample(self.root, i, self.index)

    def __getitem__(self, i: int) -> Dict[str, torch.Tensor]:
        return sample_to_tensors(self.get_sample(i))
