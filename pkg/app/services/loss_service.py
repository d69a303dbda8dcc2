"""
Loss Service
Cross-entropy on Depth Coefficients with analytic gradients, reference MSE/MAE
losses, and the two-point ambiguity landscapes used to show why MSE prefers
mixed-depth solutions.
"""

import logging
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np

from app.config import settings
from app.services.dc_codec import BinGrid, DepthImage
from app.utils import (
    ArrayValidator,
    ConfigurationError,
    EmptyMaskError,
    InvalidInputError,
    MissingPixelError,
)

logger = logging.getLogger(__name__)

LandscapeLoss = Literal["mse", "mae", "tmse", "tmae"]


@dataclass
class LogitImage:
    """H x W x N network logits over a bin grid."""

    logits: np.ndarray
    grid: BinGrid

    def __post_init__(self):
        self.logits = ArrayValidator.require_finite(self.logits, "logits")
        if self.logits.ndim != 3 or self.logits.shape[2] != self.grid.n_bins:
            raise ConfigurationError(f"logits must be H x W x {self.grid.n_bins}, got {self.logits.shape}")

    def probabilities(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)


@dataclass
class LossReport:
    """Summed loss, mean per pixel, and the number of contributing pixels."""

    total: float
    per_pixel_mean: float
    n_pixels: int


@dataclass
class Landscape:
    """Sampled two-point loss curve and its grid argmin."""

    depths: np.ndarray
    losses: np.ndarray
    argmin_depth: float

    def rows(self) -> List[Tuple[float, float]]:
        return list(zip(self.depths.tolist(), self.losses.tolist()))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along an axis (max subtraction)."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def softmax_pixel(logits: Sequence[float]) -> np.ndarray:
    """
    Normalize one pixel's logits into a coefficient vector.

    Raises:
        InvalidInputError: If any logit is not finite
    """
    values = ArrayValidator.require_finite(logits, "logits").reshape(-1)
    return softmax(values)


def cross_entropy_pixel(gt: np.ndarray, pred: np.ndarray) -> float:
    """
    Cross-entropy -sum_j c_j log(pred_j) over the non-zero ground-truth entries.

    Args:
        gt: Ground-truth DC vector (encoder output)
        pred: Predicted coefficient vector

    Returns:
        Cross-entropy in nats

    Raises:
        MissingPixelError: If gt is all zero (the pixel has no ground truth)
    """
    target = ArrayValidator.require_finite(gt, "gt").reshape(-1)
    probs = ArrayValidator.require_finite(pred, "pred").reshape(-1)
    ArrayValidator.require_same_shape(target, probs, "gt and pred")
    support = np.nonzero(target)[0]
    if support.size == 0:
        raise MissingPixelError("ground-truth DC vector is all zero; exclude the pixel")
    floored = np.maximum(probs[support], settings.PROBABILITY_FLOOR)
    return float(-np.sum(target[support] * np.log(floored)))


def ce_gradient_logits(gt: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """
    Gradient of cross_entropy_pixel(gt, softmax(logits)) with respect to the logits.

    Returns:
        softmax(logits) - gt
    """
    target = ArrayValidator.require_finite(gt, "gt").reshape(-1)
    values = ArrayValidator.require_finite(logits, "logits").reshape(-1)
    ArrayValidator.require_same_shape(target, values, "gt and logits")
    return softmax(values) - target


def cross_entropy_image(
    gt: np.ndarray, logits: np.ndarray, mask: np.ndarray
) -> Tuple[LossReport, np.ndarray]:
    """
    Mean cross-entropy over masked pixels and its gradient with respect to the logits.

    Args:
        gt: (..., N) ground-truth coefficients
        logits: (..., N) logits
        mask: (...) boolean pixels with ground truth

    Returns:
        (LossReport, gradient of the mean loss, zero outside the mask)

    Raises:
        EmptyMaskError: If no pixel is selected
    """
    n_pixels = int(np.count_nonzero(mask))
    if n_pixels == 0:
        raise EmptyMaskError("cross-entropy needs at least one pixel with ground truth")
    probs = softmax(logits, axis=-1)
    log_probs = np.log(np.maximum(probs, settings.PROBABILITY_FLOOR))
    per_pixel = -np.sum(gt * log_probs, axis=-1)
    total = float(np.sum(per_pixel[mask]))
    grad = (probs - gt) * mask[..., None] / n_pixels
    return LossReport(total=total, per_pixel_mean=total / n_pixels, n_pixels=n_pixels), grad


def _masked_errors(pred: DepthImage, gt: DepthImage, mask: Optional[np.ndarray]) -> np.ndarray:
    ArrayValidator.require_same_shape(pred.depth, gt.depth)
    selected = pred.valid & gt.valid
    if mask is not None:
        selected &= mask
    if not np.any(selected):
        raise EmptyMaskError("no pixel is present in both images under the mask")
    return pred.depth[selected] - gt.depth[selected]


def mse_loss(pred: DepthImage, gt: DepthImage, mask: Optional[np.ndarray] = None) -> float:
    """Mean squared error over pixels present in both images (and the optional mask)."""
    errors = _masked_errors(pred, gt, mask)
    return float(np.mean(errors ** 2))


def mae_loss(pred: DepthImage, gt: DepthImage, mask: Optional[np.ndarray] = None) -> float:
    """Mean absolute error over pixels present in both images (and the optional mask)."""
    errors = _masked_errors(pred, gt, mask)
    return float(np.mean(np.abs(errors)))


def _penalty(residual: np.ndarray, loss: LandscapeLoss, t: float) -> np.ndarray:
    if loss == "mse":
        return residual ** 2
    if loss == "mae":
        return np.abs(residual)
    if loss == "tmse":
        return np.minimum(residual ** 2, t ** 2)
    if loss == "tmae":
        return np.minimum(np.abs(residual), t)
    raise ConfigurationError(f"Unknown landscape loss: {loss}")


def two_point_loss(d: np.ndarray, d1: float, d2: float, loss: LandscapeLoss, t: float = 1.0) -> np.ndarray:
    """L(d) = (rho(d - d1) + rho(d - d2)) / 2 for an estimate d facing two equally likely depths."""
    d = np.asarray(d, dtype=np.float64)
    return 0.5 * (_penalty(d - d1, loss, t) + _penalty(d - d2, loss, t))


def two_point_loss_landscape(
    d1: float, d2: float, loss: LandscapeLoss = "mse", t: float = 1.0, samples: int = 801
) -> Landscape:
    """
    Sample the two-point loss on a uniform grid over [d1 - 1, d2 + 1].

    Args:
        d1: First candidate depth
        d2: Second candidate depth (> d1)
        loss: "mse", "mae", "tmse" or "tmae"
        t: Threshold for the thresholded variants
        samples: Number of grid points (>= 3)

    Returns:
        Landscape with the grid argmin (first minimum on ties)
    """
    if not d1 < d2:
        raise InvalidInputError(f"need d1 < d2, got {d1} and {d2}")
    if samples < 3:
        raise InvalidInputError("samples must be at least 3")
    if loss in ("tmse", "tmae"):
        ArrayValidator.require_positive(t, "t")
    depths = np.linspace(d1 - 1.0, d2 + 1.0, samples)
    losses = two_point_loss(depths, d1, d2, loss, t)
    argmin = float(depths[int(np.argmin(losses))])
    logger.debug(f"{loss} landscape for ({d1}, {d2}): argmin at {argmin}")
    return Landscape(depths=depths, losses=losses, argmin_depth=argmin)


def fit_free_logits(
    targets: Sequence[np.ndarray],
    learning_rate: float = 2.0,
    steps: int = 5000,
    initial_logits: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, List[float]]:
    """
    Gradient descent on a single logit vector against the mean cross-entropy of several targets.

    This is the degenerate network: the same input is paired with every target,
    so the optimum is the softmax equal to the average target density.

    Args:
        targets: DC vectors (non-zero) sharing a grid
        learning_rate: Step size
        steps: Number of iterations
        initial_logits: Starting point (zeros by default)

    Returns:
        (final logits, loss curve)
    """
    stacked = np.stack([ArrayValidator.require_finite(c, "target").reshape(-1) for c in targets])
    if np.any(~np.any(stacked > 0, axis=1)):
        raise MissingPixelError("every target must hold coefficient mass")
    mean_target = stacked.mean(axis=0)
    logits = np.zeros(stacked.shape[1]) if initial_logits is None else np.array(initial_logits, dtype=np.float64)
    curve: List[float] = []
    for _ in range(steps):
        probs = softmax(logits)
        floored = np.log(np.maximum(probs, settings.PROBABILITY_FLOOR))
        curve.append(float(-np.mean(stacked @ floored)))
        # Mean of (p - c_i) over targets
        logits = logits - learning_rate * (probs - mean_target)
    return logits, curve
