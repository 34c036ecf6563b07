"""
Evaluation metrics: DICE overlap, complex-wavelet SSIM (with plain SSIM for
comparison) and the rotation-robustness statistic of detected angles.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from skimage.metrics import structural_similarity

from errors import ConfigurationError, RoTIRError
from geometry import SimilarityTransform, rotate_image

logger = logging.getLogger(__name__)

LEVELS = 4
ORIENTATIONS = 6
WINDOW = 7
QUARTER_TURNS = (0, 1, 2, 3)
ROBUSTNESS_COLUMNS = ["pair_id", "residuals_deg", "std_deg", "extreme_deg", "failed"]


def _as_binary(mask, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype != bool:
        if not np.isin(mask, (0, 1)).all():
            raise ConfigurationError(f"{name} is not a binary mask")
        mask = mask.astype(bool)
    return mask


def dice(a, b) -> float:
    """2 |a & b| / (|a| + |b|)."""
    a = _as_binary(a, "first mask")
    b = _as_binary(b, "second mask")
    if a.shape != b.shape:
        raise ConfigurationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        raise ConfigurationError("DICE is undefined for two empty masks")
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass
class ComplexPyramid:
    bands: List[List[np.ndarray]]  # [level][orientation] complex coefficients
    lowpass: np.ndarray

    @property
    def levels(self) -> int:
        return len(self.bands)

    @property
    def orientations(self) -> int:
        return len(self.bands[0])


def polar_frequency_grid(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Radius (1 = Nyquist) and angle of every frequency sample, DC at index n // 2."""
    k = (np.arange(n) - n // 2) * (2.0 / n)
    fx, fy = np.meshgrid(k, k)
    return np.hypot(fx, fy), np.arctan2(fy, fx)


def radial_filters(rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """One-octave log raised-cosine split between 1/4 and 1/2 Nyquist; hi**2 + lo**2 = 1."""
    ramp = np.clip(-1.0 - np.log2(np.maximum(rho, 1e-12)), 0.0, 1.0)
    return np.cos(0.5 * np.pi * ramp), np.sin(0.5 * np.pi * ramp)


def angular_filter(angle: np.ndarray, orientation: int, orientations: int) -> np.ndarray:
    """One-sided cos**(O-1) orientation filter; zero on the opposite half plane so bands are complex."""
    order = orientations - 1
    const = 2.0 ** (2 * order) * math.factorial(order) ** 2 / (orientations * math.factorial(2 * order))
    diff = np.angle(np.exp(1j * (angle - np.pi * orientation / orientations)))
    return np.where(np.abs(diff) < np.pi / 2, 2.0 * math.sqrt(const) * np.cos(diff) ** order, 0.0)


def band_filters(n: int, orientations: int = ORIENTATIONS) -> List[np.ndarray]:
    rho, angle = polar_frequency_grid(n)
    hi, _ = radial_filters(rho)
    return [hi * angular_filter(angle, o, orientations) for o in range(orientations)]


def complex_wavelet_transform(img, levels: int = LEVELS, orientations: int = ORIENTATIONS) -> ComplexPyramid:
    """Frequency-domain complex steerable pyramid; level l has side ceil(side_{l-1} / 2)."""
    image = np.asarray(img, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ConfigurationError(f"pyramid needs a square image, got shape {image.shape}")
    if levels < 2 or orientations < 1:
        raise ConfigurationError(f"invalid pyramid settings: {levels} levels, {orientations} orientations")
    if image.shape[0] < 2 ** levels:
        raise ConfigurationError(f"image side {image.shape[0]} is too small for {levels} levels")

    spectrum = np.fft.fftshift(np.fft.fft2(image))
    bands = []
    for _ in range(levels):
        n = spectrum.shape[0]
        rho, angle = polar_frequency_grid(n)
        hi, lo = radial_filters(rho)
        level = []
        for o in range(orientations):
            band = spectrum * hi * angular_filter(angle, o, orientations)
            level.append(np.fft.ifft2(np.fft.ifftshift(band)))
        bands.append(level)
        m = (n + 1) // 2
        start = n // 2 - m // 2
        spectrum = (spectrum * lo)[start:start + m, start:start + m] * (m / n) ** 2
    return ComplexPyramid(bands, np.real(np.fft.ifft2(np.fft.ifftshift(spectrum))))


def _window_sum(x: np.ndarray, window: int) -> np.ndarray:
    """Sums over every fully contained window x window block (integral image)."""
    integral = np.zeros((x.shape[0] + 1, x.shape[1] + 1), dtype=x.dtype)
    integral[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
    w = window
    return integral[w:, w:] - integral[:-w, w:] - integral[w:, :-w] + integral[:-w, :-w]


def cw_ssim(
    a,
    b,
    window: int = WINDOW,
    K: float = 0.0,
    levels: int = LEVELS,
    orientations: int = ORIENTATIONS,
    mask=None,
) -> float:
    """Mean over windows, orientations and levels of (2|sum c_a conj(c_b)| + K) / (sum|c_a|^2 + sum|c_b|^2 + K).

    With ``mask`` given, both images are multiplied by it first (background removal).
    Windows shrink to the band size on levels smaller than ``window``; windows
    where both bands vanish are left out, and two all-zero images score 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"image shapes differ: {a.shape} vs {b.shape}")
    if K < 0:
        raise ConfigurationError(f"K must be non-negative, got {K}")
    if mask is not None:
        weight = np.asarray(mask, dtype=np.float64)
        a, b = a * weight, b * weight

    pyr_a = complex_wavelet_transform(a, levels, orientations)
    pyr_b = complex_wavelet_transform(b, levels, orientations)
    level_scores = []
    for bands_a, bands_b in zip(pyr_a.bands, pyr_b.bands):
        w = min(window, bands_a[0].shape[0])
        scores = []
        for ca, cb in zip(bands_a, bands_b):
            corr = _window_sum(ca * np.conj(cb), w)
            energy = _window_sum(np.abs(ca) ** 2 + np.abs(cb) ** 2, w)
            num = 2.0 * np.abs(corr) + K
            den = energy + K
            defined = den > 0
            if defined.any():
                scores.append(float((num[defined] / den[defined]).mean()))
        if scores:
            level_scores.append(np.mean(scores))
    return float(np.mean(level_scores)) if level_scores else 1.0


def ssim(a, b, window: int = WINDOW, data_range: float = 1.0) -> float:
    """Plain windowed SSIM with uniform windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(structural_similarity(a, b, win_size=window, gaussian_weights=False, data_range=data_range))


def angle_residual_deg(transform: SimilarityTransform, quarter_turns: int) -> float:
    """Detected angle with the applied pre-rotation removed, in [0, 360)."""
    return float((math.degrees(transform.theta) + 90.0 * quarter_turns) % 360.0)


def robustness_from_residuals(residuals_deg: Sequence[float]) -> Tuple[float, float]:
    """Circular standard deviation (population) and extreme spread of angle residuals, in degrees."""
    r = np.radians(np.asarray(residuals_deg, dtype=np.float64))
    if r.size == 0:
        raise ConfigurationError("no residuals to summarize")
    center = math.atan2(np.sin(r).mean(), np.cos(r).mean())
    unwrapped = np.degrees(np.angle(np.exp(1j * (r - center))))
    return float(np.std(unwrapped)), float(unwrapped.max() - unwrapped.min())


def rotation_robustness(
    register_fn: Callable[[np.ndarray, np.ndarray], Optional[SimilarityTransform]],
    pairs: Iterable[Tuple[str, np.ndarray, np.ndarray]],
    rotations: Sequence[int] = QUARTER_TURNS,
) -> pd.DataFrame:
    """Register every (pair_id, moving, fixed) with the moving image pre-rotated by each quarter turn.

    A pair whose registration fails at any rotation is flagged and left out of
    the statistics.
    """
    rows = []
    for pair_id, moving, fixed in pairs:
        residuals = []
        failed = False
        for q in rotations:
            rotated, _ = rotate_image(moving, q)
            try:
                transform = register_fn(rotated, fixed)
            except RoTIRError as e:
                logger.warning(f"Pair {pair_id}: registration failed at {90 * q} deg: {e}")
                transform = None
            if transform is None:
                failed = True
                break
            residuals.append(angle_residual_deg(transform, q))
        rows.append(robustness_record(pair_id, residuals, failed))
    return robustness_frame(rows)


def robustness_record(pair_id: str, residuals_deg: Sequence[float], failed: bool) -> dict:
    std, extreme = robustness_from_residuals(residuals_deg) if not failed else (np.nan, np.nan)
    return {
        "pair_id": pair_id,
        "residuals_deg": " ".join(f"{r:.2f}" for r in residuals_deg),
        "std_deg": std,
        "extreme_deg": extreme,
        "failed": failed,
    }


def robustness_frame(rows: List[dict]) -> pd.DataFrame:
    report = pd.DataFrame(rows, columns=ROBUSTNESS_COLUMNS)
    report["failed"] = report["failed"].astype(bool)
    n_failed = int(report["failed"].sum())
    if n_failed:
        logger.warning(f"{n_failed} of {len(report)} pairs excluded from rotation robustness")
    return report


def robustness_summary(report: pd.DataFrame) -> dict:
    """Worst-case figures over the non-failed pairs: max std, the residuals at that pair and the max extreme spread."""
    ok = report[~report["failed"]]
    if ok.empty:
        return {"max_std_deg": np.nan, "residuals_at_max_std": "", "max_extreme_deg": np.nan,
                "pairs": 0, "failed": int(report["failed"].sum())}
    worst = ok.loc[ok["std_deg"].idxmax()]
    return {
        "max_std_deg": float(worst["std_deg"]),
        "residuals_at_max_std": worst["residuals_deg"],
        "max_extreme_deg": float(ok["extreme_deg"].max()),
        "pairs": len(ok),
        "failed": int(report["failed"].sum()),
    }
