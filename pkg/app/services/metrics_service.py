"""
Metrics Service
Depth completion evaluation over the pixels present in both prediction and ground truth:
RMSE, MAE, MRE, iMAE, iRMSE, delta ratios, and the thresholded tMAE / tRMSE that cap
every per-pixel error at t so mixed-depth pixels cost the same as any other large error.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from app.config import settings
from app.services.dc_codec import DepthImage
from app.utils import (
    ArrayValidator,
    EmptyMaskError,
    InvalidGroundTruthError,
    InvalidInputError,
    csv_text,
    format_float,
)

logger = logging.getLogger(__name__)


@dataclass
class MetricReport:
    """All evaluation metrics over one masked pixel set. Inverse metrics are in 1/km."""

    rmse: float
    mae: float
    mre: float
    imae: float
    irmse: float
    tmae: float
    trmse: float
    delta: List[float]
    delta_thresholds: List[float]
    n_pixels: int
    t: float

    def header(self) -> List[str]:
        return (
            ["n_pixels", "t", "rmse", "mae", "mre", "imae", "irmse", "tmae", "trmse"]
            + [f"delta_{i + 1}" for i in range(len(self.delta))]
        )

    def row(self) -> List[object]:
        return [
            self.n_pixels, self.t, self.rmse, self.mae, self.mre,
            self.imae, self.irmse, self.tmae, self.trmse, *self.delta,
        ]

    def to_csv(self) -> str:
        """One CSV row with a fixed header."""
        return csv_text(self.header(), [self.row()])


def _intersection(pred: DepthImage, gt: DepthImage) -> np.ndarray:
    ArrayValidator.require_same_shape(pred.depth, gt.depth)
    mask = pred.valid & gt.valid
    if not np.any(mask):
        raise EmptyMaskError("no pixel is present in both prediction and ground truth")
    return mask


def _check_thresholds(thresholds: Sequence[float]) -> List[float]:
    values = [float(v) for v in thresholds]
    if any(v <= 1.0 for v in values):
        raise InvalidInputError(f"delta thresholds must exceed 1, got {values}")
    if values != sorted(values):
        raise InvalidInputError(f"delta thresholds must be ascending, got {values}")
    return values


def evaluate(
    pred: DepthImage,
    gt: DepthImage,
    t: float,
    delta_thresholds: Optional[Sequence[float]] = None,
) -> MetricReport:
    """
    Compute every metric over the intersection of present pixels.

    Args:
        pred: Predicted depth (meters)
        gt: Ground-truth depth (meters)
        t: Error cap for tMAE / tRMSE (meters)
        delta_thresholds: Ascending ratio thresholds (> 1); settings default when None

    Returns:
        MetricReport

    Raises:
        EmptyMaskError: If no pixel is present in both images
        InvalidGroundTruthError: If a masked gt depth is not positive
    """
    ArrayValidator.require_positive(t, "t")
    thresholds = _check_thresholds(
        settings.DELTA_THRESHOLDS if delta_thresholds is None else delta_thresholds
    )
    mask = _intersection(pred, gt)
    y_hat = pred.depth[mask]
    y = gt.depth[mask]
    if np.any(y <= 0):
        raise InvalidGroundTruthError("ground truth must be positive for relative and inverse metrics")

    error = y_hat - y
    abs_error = np.abs(error)
    sq_error = error ** 2
    scale = settings.INVERSE_DEPTH_UNIT_SCALE
    inv_error = scale / y_hat - scale / y
    ratio = np.maximum(y_hat / y, y / y_hat)

    report = MetricReport(
        rmse=float(np.sqrt(np.mean(sq_error))),
        mae=float(np.mean(abs_error)),
        mre=float(np.mean(abs_error / y)),
        imae=float(np.mean(np.abs(inv_error))),
        irmse=float(np.sqrt(np.mean(inv_error ** 2))),
        tmae=float(np.mean(np.minimum(abs_error, t))),
        trmse=float(np.sqrt(np.mean(np.minimum(sq_error, t * t)))),
        delta=[float(np.mean(ratio < th)) for th in thresholds],
        delta_thresholds=thresholds,
        n_pixels=int(y.size),
        t=float(t),
    )
    logger.debug(f"Evaluated {report.n_pixels} pixels: tMAE={report.tmae:.4f} MAE={report.mae:.4f}")
    return report


def tmae_saturation_rate(pred: DepthImage, gt: DepthImage, t: float) -> float:
    """
    Fraction of masked pixels whose absolute error reaches t (the tMAE cap).

    Raises:
        EmptyMaskError: If no pixel is present in both images
    """
    ArrayValidator.require_positive(t, "t")
    mask = _intersection(pred, gt)
    abs_error = np.abs(pred.depth[mask] - gt.depth[mask])
    return float(np.mean(abs_error >= t))


def format_report_table(report: MetricReport, units: str = "m") -> str:
    """Human-readable two-column table for the CLI."""
    lines = [
        f"{'pixels':<10}{report.n_pixels}",
        f"{'t':<10}{format_float(report.t)} {units}",
        f"{'RMSE':<10}{format_float(report.rmse)} {units}",
        f"{'MAE':<10}{format_float(report.mae)} {units}",
        f"{'MRE':<10}{format_float(report.mre)}",
        f"{'iMAE':<10}{format_float(report.imae)} 1/km",
        f"{'iRMSE':<10}{format_float(report.irmse)} 1/km",
        f"{'tMAE':<10}{format_float(report.tmae)} {units}",
        f"{'tRMSE':<10}{format_float(report.trmse)} {units}",
    ]
    for i, (threshold, value) in enumerate(zip(report.delta_thresholds, report.delta), start=1):
        lines.append(f"{f'delta_{i}':<10}{100.0 * value:.2f} % (< {threshold})")
    return "\n".join(lines)
