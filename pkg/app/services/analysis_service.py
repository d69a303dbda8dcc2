"""
Analysis Service
Diagnostics for depth mixing: the one-dimensional convolution demonstration
(sparse depth vs. Depth Coefficients), bird's-eye-view projection of depth images,
and the mixed-pixel rate of a prediction against ground truth.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.config import settings
from app.services.dc_codec import BinGrid, DepthImage, encode_image, peak_depths
from app.services.depth_io import Camera, write_gray_pgm
from app.utils import (
    ArrayValidator,
    EmptyMaskError,
    InvalidInputError,
    atomic_write_text,
    csv_text,
)

logger = logging.getLogger(__name__)


@dataclass
class Conv1dDemo:
    """Per-position outputs of both paths; None where the window held no known sample."""

    signal: List[Optional[float]]
    sparse_path: List[Optional[float]]
    dc_path: List[Optional[float]]
    dc_coefficients: np.ndarray

    def rows(self) -> List[List[object]]:
        return [
            [i, s, a, b]
            for i, (s, a, b) in enumerate(zip(self.signal, self.sparse_path, self.dc_path))
        ]

    def to_csv(self) -> str:
        return csv_text(["position", "signal", "sparse_path", "dc_path"], self.rows())


@dataclass
class BEVGrid:
    """Top-down pixel counts: rows index z (forward), columns index x (right)."""

    x_range: Tuple[float, float]
    z_range: Tuple[float, float]
    cell: float
    counts: np.ndarray
    out_of_range: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def cell_center(self, row: int, col: int) -> Tuple[float, float]:
        """(x, z) center of a cell in meters."""
        return (
            self.x_range[0] + (col + 0.5) * self.cell,
            self.z_range[0] + (row + 0.5) * self.cell,
        )

    def to_csv(self) -> str:
        """Non-empty cells as x, z, count."""
        rows = []
        for row, col in zip(*np.nonzero(self.counts)):
            x, z = self.cell_center(int(row), int(col))
            rows.append([x, z, int(self.counts[row, col])])
        return csv_text(["x", "z", "count"], rows)

    def to_image(self) -> np.ndarray:
        """Counts scaled linearly to 0..255 with far cells at the top."""
        peak = self.counts.max()
        if peak == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        return self.counts[::-1].astype(np.float64) * (255.0 / peak)

    def save(self, csv_path: Path, pgm_path: Optional[Path] = None) -> None:
        atomic_write_text(csv_path, self.to_csv())
        if pgm_path is not None:
            write_gray_pgm(self.to_image(), pgm_path)


# ==================== 1-D convolution demo ====================

def _check_kernel(kernel: Sequence[float]) -> np.ndarray:
    weights = ArrayValidator.require_finite(kernel, "kernel").reshape(-1)
    if weights.size % 2 == 0:
        raise InvalidInputError(f"kernel length must be odd, got {weights.size}")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise InvalidInputError("kernel weights must be non-negative with a positive sum")
    return weights


def _windows(values: np.ndarray, size: int) -> np.ndarray:
    """Zero-padded sliding windows along axis 0; window axis last."""
    radius = size // 2
    pad = [(radius, radius)] + [(0, 0)] * (values.ndim - 1)
    return sliding_window_view(np.pad(values, pad), size, axis=0)


def demo_conv1d(
    signal: Sequence[Optional[float]], kernel: Sequence[float], grid: BinGrid
) -> Conv1dDemo:
    """
    Convolve a 1-D depth slice with missing samples along two paths.

    The sparse path is a normalized convolution: weights renormalized over the known
    samples in each window. The DC path encodes the known samples (clamped into the grid),
    convolves every coefficient channel with the same kernel and decodes the peak.

    Args:
        signal: Depths in meters, None for unknown samples
        kernel: Odd-length non-negative weights
        grid: Bin grid for the DC path

    Returns:
        Conv1dDemo
    """
    weights = _check_kernel(kernel)
    values = np.array([0.0 if v is None else float(v) for v in signal])
    known = np.array([v is not None for v in signal])
    if values.size == 0:
        raise InvalidInputError("signal is empty")
    if np.any(known & ~(values > 0)) or not np.all(np.isfinite(values)):
        raise InvalidInputError("known samples must be finite positive depths")

    value_windows = _windows(values * known, weights.size)
    known_windows = _windows(known.astype(np.float64), weights.size)
    numerator = value_windows @ weights
    denominator = known_windows @ weights
    has_sample = denominator > 0
    sparse = [float(n / d) if ok else None for n, d, ok in zip(numerator, denominator, has_sample)]

    dc = encode_image(DepthImage(values[None, :]), grid, clamp=True).data[0]
    smoothed = np.tensordot(_windows(dc, weights.size), weights, axes=([2], [0]))
    peaks = np.zeros(values.size)
    if np.any(has_sample):
        peaks[has_sample] = peak_depths(smoothed[has_sample], grid)
    dc_path = [float(p) if ok else None for p, ok in zip(peaks, has_sample)]

    logger.debug(f"Convolved {values.size}-sample slice with a {weights.size}-tap kernel")
    return Conv1dDemo(
        signal=[None if v is None else float(v) for v in signal],
        sparse_path=sparse,
        dc_path=dc_path,
        dc_coefficients=smoothed,
    )


# ==================== Bird's-eye view ====================

def bev_project(
    depth: DepthImage,
    cam: Camera,
    x_range: Tuple[float, float] = (-20.0, 20.0),
    z_range: Tuple[float, float] = (0.0, 80.0),
    cell: float = 0.5,
) -> BEVGrid:
    """
    Count present pixels per top-down cell after back-projecting to (x, z) = ((u - cx) d / fx, d).

    Raises:
        InvalidInputError: If the cell size or ranges are not usable
    """
    ArrayValidator.require_positive(cell, "cell")
    if x_range[1] <= x_range[0] or z_range[1] <= z_range[0]:
        raise InvalidInputError("BEV ranges must be increasing")
    if (depth.height, depth.width) != (cam.height, cam.width):
        raise InvalidInputError(
            f"depth image is {depth.width}x{depth.height}, camera expects {cam.width}x{cam.height}"
        )
    n_x = math.ceil((x_range[1] - x_range[0]) / cell)
    n_z = math.ceil((z_range[1] - z_range[0]) / cell)
    counts = np.zeros((n_z, n_x), dtype=np.int64)

    v, u = np.nonzero(depth.valid)
    d = depth.depth[v, u]
    x = (u - cam.cx) * d / cam.fx
    col = np.floor((x - x_range[0]) / cell).astype(np.int64)
    row = np.floor((d - z_range[0]) / cell).astype(np.int64)
    inside = (col >= 0) & (col < n_x) & (row >= 0) & (row < n_z)
    np.add.at(counts, (row[inside], col[inside]), 1)

    out_of_range = int(np.count_nonzero(~inside))
    logger.info(f"BEV: {int(inside.sum())} pixels binned, {out_of_range} out of range")
    return BEVGrid(x_range=tuple(x_range), z_range=tuple(z_range), cell=cell, counts=counts,
                   out_of_range=out_of_range)


# ==================== Mixed pixels ====================

def mixed_pixel_mask(
    pred: DepthImage, gt: DepthImage, t: float, radius: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Flag predicted pixels that are farther than t from every ground-truth depth in
    their (2r + 1)^2 window.

    Returns:
        (mixed mask, evaluated mask)

    Raises:
        EmptyMaskError: If no pixel is present in both images
    """
    ArrayValidator.require_positive(t, "t")
    ArrayValidator.require_same_shape(pred.depth, gt.depth)
    r = settings.MIXED_WINDOW_RADIUS if radius is None else int(radius)
    if r < 0:
        raise InvalidInputError(f"window radius must be non-negative, got {r}")
    evaluated = pred.valid & gt.valid
    if not np.any(evaluated):
        raise EmptyMaskError("no pixel is present in both prediction and ground truth")

    reference = np.where(gt.valid, gt.depth, np.nan)
    padded = np.pad(reference, r, constant_values=np.nan)
    windows = sliding_window_view(padded, (2 * r + 1, 2 * r + 1))
    gaps = np.abs(windows - pred.depth[:, :, None, None])
    # Evaluated pixels always see their own gt, so the window is never all-NaN there
    nearest = np.full(pred.depth.shape, np.inf)
    nearest[evaluated] = np.nanmin(gaps[evaluated].reshape(int(evaluated.sum()), -1), axis=1)
    return (nearest > t) & evaluated, evaluated


def mixed_pixel_rate(
    pred: DepthImage, gt: DepthImage, t: float, radius: Optional[int] = None
) -> float:
    """Fraction of evaluated pixels flagged by mixed_pixel_mask."""
    mixed, evaluated = mixed_pixel_mask(pred, gt, t, radius)
    return float(mixed.sum() / evaluated.sum())
