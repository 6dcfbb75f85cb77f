"""
Training criteria and evaluation metrics for registration.
"""
import logging
import math
from typing import Dict, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage
from scipy.spatial.distance import cdist

from grid_field import (
    GridMismatchError, ScalarImage, Transform, VectorField, displacement_gradient, exponentiate,
    negative_jacobian_fraction, scale_field, smooth_array, warp_image,
)

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 5000.0


class MetricError(ValueError):
    """Metric undefined for the given inputs."""


class LccConfig(BaseModel):
    """Local cross-correlation settings."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    sigma_g: float = Field(default=2.0, gt=0)
    kernel_size: int = Field(default=9, ge=1)
    epsilon: float = Field(default=1e-5, gt=0)

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {value}")
        return value


def _check_pair(a: ScalarImage, b: ScalarImage):
    if a.grid != b.grid:
        raise GridMismatchError(f"grid {b.grid} does not match {a.grid}")


def halfway_warps(F: ScalarImage, M: ScalarImage, v: VectorField, steps: int):
    """F o exp(-v/2) and M o exp(v/2)."""
    _check_pair(F, M)
    if v.grid != F.grid:
        raise GridMismatchError(f"velocity grid {v.grid} does not match {F.grid}")
    F_half = warp_image(F, exponentiate(scale_field(v, -0.5), steps))
    M_half = warp_image(M, exponentiate(scale_field(v, 0.5), steps))
    return F_half, M_half


def lcc_ratio(F_values: np.ndarray, M_values: np.ndarray, cfg: LccConfig) -> np.ndarray:
    """Per-voxel ratio mean(FM)^2 / (mean(F^2) mean(M^2) + eps), local means by Gaussian smoothing."""
    axes = range(F_values.ndim)

    def local_mean(x):
        return smooth_array(x, cfg.sigma_g, cfg.kernel_size, axes)

    numerator = local_mean(F_values * M_values) ** 2
    denominator = local_mean(F_values ** 2) * local_mean(M_values ** 2) + cfg.epsilon
    return numerator / denominator


def lcc_map(F: ScalarImage, M: ScalarImage, v: VectorField, cfg: LccConfig, steps: int) -> ScalarImage:
    F_half, M_half = halfway_warps(F, M, v, steps)
    return ScalarImage(F.grid, lcc_ratio(F_half.values, M_half.values, cfg))


def lcc(F: ScalarImage, M: ScalarImage, v: VectorField, cfg: LccConfig, steps: int) -> float:
    """Symmetric local cross-correlation in [0, 1); higher is more similar."""
    return float(np.mean(lcc_map(F, M, v, cfg, steps).values))


def lcc_loss_term(F: ScalarImage, M: ScalarImage, v: VectorField, cfg: LccConfig,
                  steps: int, lam: float = DEFAULT_LAMBDA) -> float:
    """Reconstruction negative log-likelihood under the LCC Boltzmann model: -lambda * lcc."""
    if lam <= 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    return -lam * lcc(F, M, v, cfg, steps)


def kl_diag_gaussian(mu: np.ndarray, logvar: np.ndarray) -> float:
    """KL(N(mu, diag exp(logvar)) || N(0, I))."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * np.sum(mu ** 2 + np.exp(logvar) - logvar - 1.0))


def ssd(F: ScalarImage, M_warped: ScalarImage) -> float:
    """Mean squared intensity difference."""
    _check_pair(F, M_warped)
    return float(np.mean((F.values - M_warped.values) ** 2))


def rmse(F: ScalarImage, M_warped: ScalarImage) -> float:
    return math.sqrt(ssd(F, M_warped))


def dice(A: np.ndarray, B: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); 1 when both masks are empty."""
    A = np.asarray(A, dtype=bool)
    B = np.asarray(B, dtype=bool)
    if A.shape != B.shape:
        raise GridMismatchError(f"mask shape {B.shape} does not match {A.shape}")
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(A, B).sum()) / total


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels face-connected to background (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def _nearest_rank(values: np.ndarray, percentile: float) -> float:
    ordered = np.sort(values)
    rank = max(int(math.ceil(percentile / 100.0 * len(ordered))), 1)
    return float(ordered[rank - 1])


def hausdorff95(A: np.ndarray, B: np.ndarray, spacing: Sequence[float]) -> float:
    """Symmetric 95th-percentile Hausdorff distance between mask boundaries, in mm."""
    A = np.asarray(A, dtype=bool)
    B = np.asarray(B, dtype=bool)
    if A.shape != B.shape:
        raise GridMismatchError(f"mask shape {B.shape} does not match {A.shape}")
    if not A.any() or not B.any():
        raise MetricError("hausdorff95 is undefined for an empty mask")
    scale = np.asarray(spacing, dtype=np.float64)
    points_a = np.argwhere(mask_boundary(A)) * scale
    points_b = np.argwhere(mask_boundary(B)) * scale
    distances = cdist(points_a, points_b)
    a_to_b = _nearest_rank(distances.min(axis=1), 95.0)
    b_to_a = _nearest_rank(distances.min(axis=0), 95.0)
    return max(a_to_b, b_to_a)


def field_stats(u: VectorField) -> Dict[str, float]:
    """Mean displacement magnitude and mean Frobenius norm of its gradient."""
    magnitude = np.linalg.norm(u.vectors, axis=-1)
    gradient = displacement_gradient(u)
    frobenius = np.sqrt(np.sum(gradient ** 2, axis=(-2, -1)))
    return {
        "mean_magnitude": float(magnitude.mean()),
        "mean_gradient": float(frobenius.mean()),
    }


def segmentation_metrics(warped_masks: Dict[str, np.ndarray], fixed_masks: Dict[str, np.ndarray],
                         spacing: Sequence[float]) -> Dict[str, float]:
    """Dice and hd95 per label present in both mask sets."""
    report = {}
    for label in sorted(set(warped_masks) & set(fixed_masks)):
        report[f"dice_{label}"] = dice(warped_masks[label], fixed_masks[label])
        try:
            report[f"hd95_{label}"] = hausdorff95(warped_masks[label], fixed_masks[label], spacing)
        except MetricError as e:
            logger.warning(f"hd95 skipped for label {label}: {e}")
    return report


def metrics_report(F: ScalarImage, M: ScalarImage, v: VectorField, phi: Transform,
                   warped: ScalarImage, cfg: LccConfig, steps: int,
                   warped_masks: Optional[Dict[str, np.ndarray]] = None,
                   fixed_masks: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, float]:
    """All registration metrics of one pair, flattened for a key=value report."""
    report = {
        "rmse": rmse(F, warped),
        "lcc": lcc(F, M, v, cfg, steps),
    }
    if warped_masks and fixed_masks:
        report.update(segmentation_metrics(warped_masks, fixed_masks, F.grid.spacing))
    report.update(field_stats(phi.displacement))
    report["neg_jac_fraction"] = negative_jacobian_fraction(phi)
    return report


def format_report(metrics: Dict[str, float]) -> str:
    """Flat key=value lines, numbers with 9 significant digits."""
    lines = []
    for key, value in metrics.items():
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            lines.append(f"{key}={int(value)}")
        else:
            lines.append(f"{key}={float(value):.9g}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> Dict[str, float]:
    report = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        report[key.strip()] = float(value)
    return report
