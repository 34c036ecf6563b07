"""
Training loop, end-to-end registration and the four-rotation evaluation protocol.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from assignment import MatchSet, extract_matches
from config import RoTIRConfig, VariantConfig
from datasynth import RegistrationDataset, TrainingSample, foreground_mask
from errors import (
    ConfigurationError,
    DegenerateEstimateError,
    EmptyForegroundError,
    NoSolutionError,
    NumericalFailure,
    RoTIRError,
)
from geometry import PatchGrid, SimilarityTransform, estimate_from_params, estimate_procrustes, rotate_image, warp_image
from losses import LossWeights, angle_loss, confidence_loss, refinement_loss, scale_loss, total_loss
from metrics import (
    QUARTER_TURNS,
    angle_residual_deg,
    cw_ssim,
    dice,
    robustness_frame,
    robustness_record,
    robustness_summary,
    rotation_robustness,
)
from model import ModelOutput, RegistrationModel, TrainState, load_checkpoint, make_optimizer, save_checkpoint

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pt"
LOSS_HISTORY_NAME = "loss_history.csv"
REPORT_COLUMNS = ["pair_id", "variant", "rotation", "dice", "cw_ssim", "angle_residual_deg"]

Rect = Tuple[float, float, float, float]


def parse_rect(text: str) -> Rect:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 4:
        raise ConfigurationError(f"rectangle must be 'x,y,w,h', got {text!r}")
    x, y, w, h = (float(p) for p in parts)
    return x, y, w, h


def apply_rectangle_mask(grid: PatchGrid, rect: Rect) -> np.ndarray:
    """(S*S,) token validity: a token stays valid if its patch overlaps the half-open rectangle."""
    x, y, w, h = (float(v) for v in rect)
    if w <= 0 or h <= 0:
        raise ConfigurationError(f"rectangle {rect} has zero area")
    if x < 0 or y < 0 or x + w > grid.image_size or y + h > grid.image_size:
        raise ConfigurationError(f"rectangle {rect} leaves the {grid.image_size} px image")
    starts = np.arange(grid.grid_size) * grid.patch_px
    cols = (starts < x + w) & (starts + grid.patch_px > x)
    rows = (starts < y + h) & (starts + grid.patch_px > y)
    return (rows[:, None] & cols[None, :]).ravel()


def mask_bounding_rect(mask: np.ndarray, margin: float = 0.0) -> Optional[Rect]:
    """Bounding box of a binary mask grown by ``margin`` and clipped to the image; None when empty."""
    ys, xs = np.nonzero(np.asarray(mask))
    if xs.size == 0:
        return None
    h, w = np.shape(mask)[:2]
    x0, y0 = max(0.0, xs.min() - margin), max(0.0, ys.min() - margin)
    x1, y1 = min(float(w), xs.max() + 1 + margin), min(float(h), ys.max() + 1 + margin)
    return x0, y0, x1 - x0, y1 - y0


def scale_rect(rect: Rect, factor: float, size: int) -> Rect:
    x, y, w, h = (v * factor for v in rect)
    x0, y0 = max(0.0, x), max(0.0, y)
    return x0, y0, min(float(size), x + w) - x0, min(float(size), y + h) - y0


def _token_masks(masks: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    rows = []
    for mask in masks.cpu().numpy():
        rect = mask_bounding_rect(mask, grid.patch_px)
        rows.append(apply_rectangle_mask(grid, rect) if rect else np.ones(grid.n_patches, dtype=bool))
    return torch.from_numpy(np.stack(rows))


def compute_losses(
    model: RegistrationModel,
    batch: Dict[str, torch.Tensor],
    weights: LossWeights,
    variant: VariantConfig,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor], ModelOutput]:
    valid_moving = valid_fixed = None
    if variant.rectangle_mask:
        grid = model.config.grid
        valid_moving = _token_masks(batch["fg_mask_moving"], grid)
        valid_fixed = _token_masks(batch["fg_mask_fixed"], grid)
    out = model(batch["moving"], batch["fixed"], valid_moving, valid_fixed)
    matched = batch["gt_matched"]
    parts = {
        "conf": confidence_loss(out.assignment, batch["gt_assignment"]),
        "angle": angle_loss(out.head.sin, out.head.cos, batch["gt_theta"], matched),
        "refine": refinement_loss(out.head.refine, batch["gt_refine"], matched),
    }
    if variant.scale_detection:
        parts["scale"] = scale_loss(out.head.scale_exponent, batch["gt_scale"], matched)
    return total_loss(parts, weights), parts, out


def _check_parameters(model: RegistrationModel) -> None:
    for name, param in model.named_parameters():
        if not torch.isfinite(param).all():
            raise NumericalFailure(f"parameter {name} is no longer finite")


def train(
    config: RoTIRConfig,
    out_dir,
    data_dir=None,
    epochs: Optional[int] = None,
    dataset: Optional[RegistrationDataset] = None,
    progress: bool = True,
) -> TrainState:
    """Adam training with a checkpoint and the loss history written after every epoch.

    A NaN loss aborts the run; the checkpoint of the last finished epoch stays on disk.
    """
    if dataset is None:
        if data_dir is None:
            raise ConfigurationError("train needs a dataset directory")
        dataset = RegistrationDataset(root=data_dir)
    if len(dataset) == 0:
        raise ConfigurationError("training set is empty")
    epochs = epochs or config.epochs
    torch.manual_seed(config.seed)
    loader = DataLoader(dataset, batch_size=config.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(config.seed))

    model = RegistrationModel(config)
    state = TrainState(model, make_optimizer(model), 0, config.seed)
    weights = config.loss_weights()
    variant = config.variant_config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = out / CHECKPOINT_NAME
    logger.info(f"Training {variant.model_name} on {len(dataset)} pairs for {epochs} epochs (lr {config.learning_rate})")

    for epoch in range(1, epochs + 1):
        model.train()
        sums: Dict[str, float] = defaultdict(float)
        steps = 0
        for batch in tqdm(loader, desc=f"Epoch {epoch}/{epochs}", disable=not progress):
            state.optimizer.zero_grad()
            try:
                loss, parts, _ = compute_losses(model, batch, weights, variant)
            except NumericalFailure as e:
                logger.error(f"Aborting in epoch {epoch}: {e}. Last good checkpoint: {checkpoint}")
                raise
            loss.backward()
            state.optimizer.step()
            sums["loss"] += loss.item()
            for name, value in parts.items():
                sums[f"loss_{name}"] += value.item()
            steps += 1
        try:
            _check_parameters(model)
        except NumericalFailure as e:
            logger.error(f"Aborting after epoch {epoch}: {e}. Last good checkpoint: {checkpoint}")
            raise

        record = {"epoch": epoch, **{name: total / steps for name, total in sums.items()}}
        state.loss_history.append(record)
        state.epoch = epoch
        save_checkpoint(state, checkpoint)
        pd.DataFrame(state.loss_history).to_csv(out / LOSS_HISTORY_NAME, index=False)
        logger.info(f"Epoch {epoch}: loss {record['loss']:.4f} (conf {record['loss_conf']:.4f})")
    return state


def to_float_image(image) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    if image.dtype == np.uint16:
        return image.astype(np.float32) / 65535.0
    return image.astype(np.float32)


def read_image(path) -> np.ndarray:
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise FileNotFoundError(f"cannot read image {path}")
    if image.ndim == 3:
        image = cv2.cvtColor(image, cv2.COLOR_BGR2GRAY)
    return to_float_image(image)


def fold_back(transform: SimilarityTransform, k_moving: float, k_fixed: float) -> SimilarityTransform:
    """Express a transform estimated on resized images (x_small = k x) in original pixel coordinates."""
    if k_moving == 1.0 and k_fixed == 1.0:
        return transform
    c = transform.center
    t = (c + transform.translation) / k_fixed - c / k_moving
    return SimilarityTransform(
        transform.theta,
        transform.scale * k_moving / k_fixed,
        t[0], t[1],
        c[0] / k_moving, c[1] / k_moving,
    )


def _to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def blend_overlay(fixed: np.ndarray, warped: np.ndarray) -> np.ndarray:
    """Fixed image in green, warped moving image in magenta; aligned structure turns grey."""
    f, w = _to_u8(fixed), _to_u8(warped)
    return cv2.merge([w, f, w])


def draw_matches(moving: np.ndarray, fixed: np.ndarray, matches: MatchSet, max_lines: int = 64) -> np.ndarray:
    """Side-by-side key-point visualization: moving patch centers joined to refined fixed coordinates."""
    h, w = np.shape(moving)[:2]
    canvas = cv2.cvtColor(np.hstack([_to_u8(moving), _to_u8(fixed)]), cv2.COLOR_GRAY2BGR)
    order = np.argsort(-matches.confidence)[:max_lines]
    for k in order:
        start = tuple(int(round(v - 0.5)) for v in matches.moving_xy[k])
        end = (int(round(matches.fixed_xy[k, 0] - 0.5)) + w, int(round(matches.fixed_xy[k, 1] - 0.5)))
        color = (0, int(255 * matches.confidence[k]), 255)
        cv2.line(canvas, start, end, color, 1, cv2.LINE_AA)
        cv2.circle(canvas, start, 2, (0, 255, 0), -1)
        cv2.circle(canvas, end, 2, (255, 0, 0), -1)
    return canvas


@dataclass
class RegistrationResult:
    transform: SimilarityTransform
    matches: MatchSet
    warped: np.ndarray
    overlay: np.ndarray
    keypoints: np.ndarray
    failed: bool = False
    message: str = ""


class Registrar:
    """Runs a trained model on image pairs under a given variant."""

    def __init__(self, model: RegistrationModel, variant: Optional[VariantConfig] = None, threshold: Optional[float] = None):
        self.model = model.eval()
        self.config = model.config
        self.variant = variant or self.config.variant_config
        self.threshold = self.config.match_threshold if threshold is None else threshold
        self.grid = self.config.grid

    @classmethod
    def from_checkpoint(cls, path, variant: Optional[str] = None, threshold: Optional[float] = None) -> "Registrar":
        model, _ = load_checkpoint(path, variant)
        return cls(model, threshold=threshold)

    def _prepare(self, image) -> Tuple[np.ndarray, float]:
        img = to_float_image(image)
        if img.ndim != 2 or img.shape[0] != img.shape[1]:
            raise ConfigurationError(f"images must be square single-channel, got shape {img.shape}")
        size = self.config.image_size
        factor = size / img.shape[0]
        if img.shape[0] != size:
            interpolation = cv2.INTER_AREA if factor < 1 else cv2.INTER_LINEAR
            img = cv2.resize(img, (size, size), interpolation=interpolation)
        return img, factor

    def _token_mask(self, image: np.ndarray, rect: Optional[Rect], factor: float) -> Optional[torch.Tensor]:
        if not self.variant.rectangle_mask:
            return None
        if rect is not None:
            rect = scale_rect(rect, factor, self.config.image_size)
        else:
            try:
                _, mask, _ = foreground_mask(image)
                rect = mask_bounding_rect(mask, self.grid.patch_px)
            except EmptyForegroundError:
                logger.warning("No foreground found for the rectangle mask; using the full image")
                rect = None
        if rect is None:
            return None
        return torch.from_numpy(apply_rectangle_mask(self.grid, rect))[None]

    def _estimate(self, matches: MatchSet, refine: bool) -> SimilarityTransform:
        scale_enabled = self.variant.scale_detection
        if self.config.estimator == "procrustes":
            target = matches.fixed_xy if refine else matches.fixed_center_xy
            return estimate_procrustes(matches.moving_xy, target, matches.confidence, scale_enabled, self.grid.image_center)
        return estimate_from_params(matches, self.grid, scale_enabled, refine)

    def match(self, moving, fixed, rect_moving: Optional[Rect] = None, rect_fixed: Optional[Rect] = None):
        small_moving, k_moving = self._prepare(moving)
        small_fixed, k_fixed = self._prepare(fixed)
        valid_moving = self._token_mask(small_moving, rect_moving, k_moving)
        valid_fixed = self._token_mask(small_fixed, rect_fixed, k_fixed)
        with torch.no_grad():
            out = self.model(
                torch.from_numpy(small_moving)[None, None],
                torch.from_numpy(small_fixed)[None, None],
                valid_moving,
                valid_fixed,
                n_iters=self.config.sinkhorn_iters_infer,
            )
        matches = extract_matches(out.assignment, out.head, self.grid, self.threshold)
        return matches, (small_moving, k_moving), (small_fixed, k_fixed)

    def register(
        self,
        moving,
        fixed,
        rect: Optional[Rect] = None,
        rect_moving: Optional[Rect] = None,
        rect_fixed: Optional[Rect] = None,
        refine: Optional[bool] = None,
    ) -> RegistrationResult:
        """Estimate the moving -> fixed transform; an empty or degenerate match set yields identity and ``failed``."""
        refine = self.variant.refine_at_inference if refine is None else refine
        matches, (small_moving, k_moving), (small_fixed, k_fixed) = self.match(
            moving, fixed, rect_moving or rect, rect_fixed or rect
        )
        moving_full, fixed_full = to_float_image(moving), to_float_image(fixed)
        h, w = fixed_full.shape
        failed, message = False, ""
        try:
            transform = fold_back(self._estimate(matches, refine), k_moving, k_fixed)
        except (NoSolutionError, DegenerateEstimateError) as e:
            failed, message = True, str(e)
            transform = SimilarityTransform.identity((w / 2.0, h / 2.0))
            logger.warning(f"Registration failed: {e}")

        warped = warp_image(moving_full, transform, fixed_full.shape)
        return RegistrationResult(
            transform=transform,
            matches=matches,
            warped=warped,
            overlay=blend_overlay(fixed_full, warped),
            keypoints=draw_matches(small_moving, small_fixed, matches),
            failed=failed,
            message=message,
        )


def save_result(result: RegistrationResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "transform.txt").write_text(result.transform.to_record() + "\n")
    np.savetxt(out / "matrix.txt", result.transform.to_matrix(), fmt="%.17g")
    result.matches.to_frame().to_csv(out / "matches.csv", index=False)
    cv2.imwrite(str(out / "warped.png"), np.round(np.clip(result.warped, 0, 1) * 65535).astype(np.uint16))
    cv2.imwrite(str(out / "overlay.png"), result.overlay)
    cv2.imwrite(str(out / "keypoints.png"), result.keypoints)
    return out


@dataclass
class RegistrationReport:
    per_pair: pd.DataFrame
    summary: pd.DataFrame
    robustness: pd.DataFrame
    paths: List[Path] = field(default_factory=list)

    def write(self, report_path) -> List[Path]:
        path = Path(report_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        summary_path = path.with_name(f"{path.stem}_summary.csv")
        robustness_path = path.with_name(f"{path.stem}_robustness.csv")
        self.per_pair.to_csv(path, index=False)
        self.summary.to_csv(summary_path, index=False)
        self.robustness.to_csv(robustness_path, index=False)
        self.paths = [path, summary_path, robustness_path]
        return self.paths


def aggregate_report(per_pair: pd.DataFrame, variant_name: str) -> pd.DataFrame:
    """Mean and population std across pairs of the per-pair means over rotations."""
    ok = per_pair.dropna(subset=["dice", "cw_ssim"])
    pair_means = ok.groupby("pair_id")[["dice", "cw_ssim"]].mean()
    row = {"model": f"RoTIR_{variant_name}", "pairs": len(pair_means), "registrations": len(ok),
           "failed": len(per_pair) - len(ok)}
    for metric in ("dice", "cw_ssim"):
        mean = float(pair_means[metric].mean()) if len(pair_means) else np.nan
        std = float(pair_means[metric].std(ddof=0)) if len(pair_means) else np.nan
        row[f"{metric}_mean"] = mean
        row[f"{metric}_std"] = std
        row[metric] = f"{mean:.3f} ± {std:.3f}"
    return pd.DataFrame([row])


def evaluate_sample(
    registrar: Registrar,
    pair_id: str,
    sample: TrainingSample,
    rotations: Sequence[int] = QUARTER_TURNS,
) -> Tuple[List[dict], dict]:
    """Rows of the per-pair report and the robustness record for one pair."""
    cfg = registrar.config
    variant = registrar.variant.name
    fixed_mask = np.asarray(sample.fg_mask_fixed, dtype=bool)
    margin = registrar.grid.patch_px
    rect_fixed = mask_bounding_rect(fixed_mask, margin)
    rows, residuals, failed = [], [], False
    for q in rotations:
        moving, _ = rotate_image(sample.moving, q)
        moving_mask, _ = rotate_image(np.asarray(sample.fg_mask_moving, dtype=np.float32), q)
        row = {"pair_id": pair_id, "variant": variant, "rotation": 90 * q,
               "dice": np.nan, "cw_ssim": np.nan, "angle_residual_deg": np.nan}
        try:
            result = registrar.register(moving, sample.fixed,
                                        rect_moving=mask_bounding_rect(moving_mask > 0.5, margin),
                                        rect_fixed=rect_fixed)
        except RoTIRError as e:
            logger.warning(f"Pair {pair_id} at {90 * q} deg: {e}")
            failed = True
            rows.append(row)
            continue
        if result.failed:
            logger.warning(f"Pair {pair_id} at {90 * q} deg: {result.message}")
            failed = True
            rows.append(row)
            continue
        warped_mask = warp_image(moving_mask, result.transform, fixed_mask.shape) > cfg.mask_threshold
        row["dice"] = dice(warped_mask, fixed_mask)
        row["cw_ssim"] = cw_ssim(
            result.warped, sample.fixed,
            window=cfg.cwssim_window, K=cfg.cwssim_k,
            levels=cfg.cwssim_levels, orientations=cfg.cwssim_orientations,
            mask=fixed_mask if cfg.cwssim_masked else None,
        )
        row["angle_residual_deg"] = angle_residual_deg(result.transform, q)
        residuals.append(row["angle_residual_deg"])
        rows.append(row)
    return rows, robustness_record(pair_id, residuals, failed)


def _samples(dataset: RegistrationDataset, limit: Optional[int]) -> Iterator[Tuple[str, TrainingSample]]:
    count = len(dataset) if limit is None else min(limit, len(dataset))
    for i in range(count):
        yield f"{i:05d}", dataset.get_sample(i)


def evaluate(
    registrar: Registrar,
    data_dir=None,
    report_path=None,
    dataset: Optional[RegistrationDataset] = None,
    rotations: Sequence[int] = QUARTER_TURNS,
    limit: Optional[int] = None,
    progress: bool = True,
) -> RegistrationReport:
    """Four-rotation protocol over an evaluation set; per-pair failures are reported, never fatal."""
    if dataset is None:
        dataset = RegistrationDataset(root=data_dir)
    rows, records = [], []
    total = len(dataset) if limit is None else min(limit, len(dataset))
    for pair_id, sample in tqdm(_samples(dataset, limit), desc="Evaluating", disable=not progress, total=total):
        pair_rows, record = evaluate_sample(registrar, pair_id, sample, rotations)
        rows.extend(pair_rows)
        records.append(record)
    per_pair = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    report = RegistrationReport(per_pair, aggregate_report(per_pair, registrar.variant.name), robustness_frame(records))
    summary = report.summary.iloc[0]
    logger.info(f"{summary['model']}: DICE {summary['dice']}, CW-SSIM {summary['cw_ssim']} "
                f"over {summary['pairs']} pairs ({summary['failed']} failed registrations)")
    worst = robustness_summary(report.robustness)
    logger.info(f"Rotation robustness: max std {worst['max_std_deg']:.2f} deg "
                f"(residuals {worst['residuals_at_max_std']}), max extreme {worst['max_extreme_deg']:.2f} deg")
    if report_path is not None:
        report.write(report_path)
    return report


def robustness(
    registrar: Registrar,
    data_dir=None,
    report_path=None,
    dataset: Optional[RegistrationDataset] = None,
    limit: Optional[int] = None,
) -> pd.DataFrame:
    """Detected-angle spread under quarter-turn pre-rotations of the moving image."""
    if dataset is None:
        dataset = RegistrationDataset(root=data_dir)

    def register_fn(moving, fixed):
        result = registrar.register(moving, fixed)
        return None if result.failed else result.transform

    pairs = ((pair_id, s.moving, s.fixed) for pair_id, s in _samples(dataset, limit))
    report = rotation_robustness(register_fn, pairs)
    if report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        report.to_csv(report_path, index=False)
    return report
