"""
Depth Coefficients codec.

Defines the uniform depth bin grid and converts metric depth to and from
Depth Coefficients (DC): a per-pixel vector over the bins that is non-negative,
sums to one and whose inner product with the bin centers is the depth.

Encoding puts mass on three consecutive bins around the closest center.
Decoding either takes the inner product with all centers ("all") or only
the peak coefficient and its two neighbors ("3coeff"), which stays on one
mode of a multi-modal density.
"""

import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app.config import settings
from app.utils import (
    ArrayValidator,
    ConfigurationError,
    DepthCoefficientsError,
    DepthRangeError,
    InvalidInputError,
    MissingPixelError,
    NormalizationError,
    at_pixel,
)

logger = logging.getLogger(__name__)

DecodeMode = Literal["all", "3coeff"]
GridKind = Literal["outdoor", "indoor", "toy"]


class BinGrid(BaseModel):
    """Uniform depth axis D_1..D_N over [d_min, d_max] with centers at d_min + (j - 0.5) * b."""

    model_config = ConfigDict(frozen=True)

    d_min: float
    d_max: float
    n_bins: int

    @model_validator(mode="after")
    def _check_span(self) -> "BinGrid":
        if not (math.isfinite(self.d_min) and math.isfinite(self.d_max)):
            raise ValueError("grid bounds must be finite")
        if self.d_min < 0:
            raise ValueError("d_min must be non-negative")
        if self.d_max <= self.d_min:
            raise ValueError("d_max must exceed d_min")
        if self.n_bins < 3:
            raise ValueError("a grid needs at least 3 bins to hold a coefficient triplet")
        return self

    @property
    def b(self) -> float:
        """Bin width in meters."""
        return (self.d_max - self.d_min) / self.n_bins

    @property
    def centers(self) -> np.ndarray:
        """Bin centers D_1..D_N in meters."""
        return self.d_min + (np.arange(self.n_bins, dtype=np.float64) + 0.5) * self.b

    @property
    def encodable_min(self) -> float:
        """Smallest depth whose coefficient triplet fits inside the grid."""
        return self.d_min + self.b

    @property
    def encodable_max(self) -> float:
        """Largest depth whose coefficient triplet fits inside the grid."""
        return self.d_max - self.b

    def clamp(self, depth: np.ndarray) -> np.ndarray:
        """Snap depths into the encodable interval."""
        return np.clip(depth, self.encodable_min, self.encodable_max)


def default_grid(kind: GridKind = "outdoor") -> BinGrid:
    """
    Build one of the configured default grids.

    Args:
        kind: "outdoor" (80 x 1 m), "indoor" (80 x 0.1 m) or "toy" (desk-scale training)

    Returns:
        BinGrid from settings
    """
    if kind == "outdoor":
        return BinGrid(d_min=settings.GRID_D_MIN, d_max=settings.GRID_D_MAX, n_bins=settings.GRID_N_BINS)
    if kind == "indoor":
        return BinGrid(
            d_min=settings.INDOOR_GRID_D_MIN,
            d_max=settings.INDOOR_GRID_D_MAX,
            n_bins=settings.INDOOR_GRID_N_BINS,
        )
    if kind == "toy":
        return BinGrid(d_min=0.0, d_max=settings.TOY_GRID_D_MAX, n_bins=settings.TOY_N_BINS)
    raise ConfigurationError(f"Unknown grid kind: {kind}")


@dataclass
class DepthImage:
    """Metric depth image; 0.0 marks a missing pixel."""

    depth: np.ndarray

    def __post_init__(self):
        self.depth = np.ascontiguousarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ConfigurationError(f"depth image must be 2-D, got shape {self.depth.shape}")
        bad = ~np.isfinite(self.depth) | (self.depth < 0)
        if np.any(bad):
            row, col = ArrayValidator.first_index(bad)
            raise InvalidInputError(
                f"pixel ({row}, {col}): depth must be finite and non-negative, got {self.depth[row, col]}"
            )

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def valid(self) -> np.ndarray:
        """Mask of present pixels."""
        return self.depth > 0

    @classmethod
    def from_optional(cls, rows: Sequence[Sequence[Optional[float]]]) -> "DepthImage":
        """Build an image from nested lists where None marks a missing pixel."""
        array = np.array([[0.0 if v is None else float(v) for v in row] for row in rows])
        return cls(array)

    @classmethod
    def empty(cls, height: int, width: int) -> "DepthImage":
        return cls(np.zeros((height, width)))


@dataclass
class DCImage:
    """H x W x N Depth Coefficients sharing one grid. All-zero pixels are missing."""

    data: np.ndarray
    grid: BinGrid

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != self.grid.n_bins:
            raise ConfigurationError(
                f"DC image must be H x W x {self.grid.n_bins}, got {self.data.shape}"
            )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def present(self) -> np.ndarray:
        """Mask of pixels holding any coefficient mass."""
        return np.any(self.data != 0, axis=2)


def _validate_depths(depth: np.ndarray, grid: BinGrid, clamp: bool) -> np.ndarray:
    """Check depths for encoding and return them snapped into the encodable interval."""
    bad = ~np.isfinite(depth) | (depth <= 0)
    if np.any(bad):
        index = ArrayValidator.first_index(bad) if depth.ndim else ()
        value = depth[index] if index else depth
        raise InvalidInputError(f"depth must be finite and positive, got {value}")
    if not clamp:
        # Tolerance absorbs rounding on the interval ends
        tol = 1e-9 * grid.b
        out = (depth < grid.encodable_min - tol) | (depth > grid.encodable_max + tol)
        if np.any(out):
            index = ArrayValidator.first_index(out) if depth.ndim else ()
            value = depth[index] if index else depth
            raise DepthRangeError(
                f"depth {float(value)} outside encodable range "
                f"[{grid.encodable_min}, {grid.encodable_max}] (use clamp)"
            )
    return grid.clamp(depth)


def _triplets(depth: np.ndarray, grid: BinGrid):
    """Closest-bin index (0-based) and the three coefficients for each depth."""
    x = (depth - grid.d_min) / grid.b
    k = np.clip(np.ceil(x).astype(np.int64) - 1, 0, grid.n_bins - 1)
    delta = np.clip((depth - grid.centers[k]) / grid.b, -0.5, 0.5)
    lower = (0.5 - delta) / 2.0
    upper = (0.5 + delta) / 2.0
    return k, (lower, np.full_like(delta, 0.5), upper)


def encode_pixel(d: float, grid: BinGrid, clamp: bool = False) -> np.ndarray:
    """
    Encode one metric depth as a DC vector with three non-zero coefficients.

    Args:
        d: Depth in meters
        grid: Bin grid
        clamp: Snap out-of-range depths into the encodable interval instead of failing

    Returns:
        Length-N coefficient vector

    Raises:
        InvalidInputError: If d is NaN, infinite or not positive
        DepthRangeError: If d is outside the encodable interval and clamp is False
    """
    depth = _validate_depths(np.asarray(float(d)), grid, clamp)
    k, coeffs = _triplets(depth.reshape(1), grid)
    vector = np.zeros(grid.n_bins)
    for offset, value in zip((-1, 0, 1), coeffs):
        index = int(k[0]) + offset
        if 0 <= index < grid.n_bins:
            vector[index] = value[0]
    return vector


def encode_image(depth: DepthImage, grid: BinGrid, clamp: bool = False) -> DCImage:
    """
    Encode a dense or sparse depth image; missing pixels become all-zero vectors.

    Raises:
        InvalidInputError, DepthRangeError: With the offending pixel coordinates
    """
    valid = depth.valid
    rows, cols = np.nonzero(valid)
    values = depth.depth[rows, cols]
    try:
        values = _validate_depths(values, grid, clamp)
    except DepthCoefficientsError as exc:
        bad = ~np.isfinite(values) | (values <= 0)
        if not clamp:
            bad |= (values < grid.encodable_min - 1e-9 * grid.b) | (values > grid.encodable_max + 1e-9 * grid.b)
        first = int(np.argmax(bad))
        raise at_pixel(exc, int(rows[first]), int(cols[first])) from exc

    data = np.zeros((depth.height, depth.width, grid.n_bins))
    k, coeffs = _triplets(values, grid)
    for offset, value in zip((-1, 0, 1), coeffs):
        index = k + offset
        inside = (index >= 0) & (index < grid.n_bins)
        data[rows[inside], cols[inside], index[inside]] = value[inside]

    logger.debug(f"Encoded {len(values)} pixels onto {grid.n_bins} bins")
    return DCImage(data=data, grid=grid)


def decode_all(c: np.ndarray, grid: BinGrid) -> float:
    """
    Depth as the inner product of the coefficients with all bin centers.

    Coefficients within the normalization tolerance of sum 1 are renormalized.

    Raises:
        MissingPixelError: If the vector is all zero
        NormalizationError: If the sum is off by more than the tolerance
    """
    coeffs = _check_vector(c, grid)
    total = float(coeffs.sum())
    if abs(total - 1.0) > settings.NORMALIZATION_TOLERANCE:
        raise NormalizationError(f"coefficients sum to {total}, expected 1")
    return float(coeffs @ grid.centers) / total


def decode_3coeff(c: np.ndarray, grid: BinGrid) -> float:
    """
    Depth from the peak coefficient and its two neighbors.

    The peak is the lowest index among maximal coefficients; neighbors outside
    the grid carry zero weight.

    Raises:
        MissingPixelError: If the vector is all zero
    """
    coeffs = _check_vector(c, grid)
    return float(peak_depths(coeffs.reshape(1, -1), grid)[0])


def decode_image(dc: DCImage, mode: DecodeMode = "3coeff") -> DepthImage:
    """
    Decode every present pixel of a DC image; all-zero pixels decode to missing.

    Args:
        dc: DC image
        mode: "all" (inner product) or "3coeff" (peak and neighbors)

    Returns:
        DepthImage
    """
    present = dc.present
    flat = dc.data[present]
    depth = np.zeros((dc.height, dc.width))
    if flat.size == 0:
        return DepthImage(depth)

    negative = np.any(flat < 0, axis=1)
    if np.any(negative):
        rows, cols = np.nonzero(present)
        first = int(np.argmax(negative))
        raise at_pixel(InvalidInputError("coefficients must be non-negative"), int(rows[first]), int(cols[first]))

    if mode == "all":
        totals = flat.sum(axis=1)
        off = np.abs(totals - 1.0) > settings.NORMALIZATION_TOLERANCE
        if np.any(off):
            rows, cols = np.nonzero(present)
            first = int(np.argmax(off))
            raise at_pixel(
                NormalizationError(f"coefficients sum to {totals[first]}, expected 1"),
                int(rows[first]),
                int(cols[first]),
            )
        values = (flat @ dc.grid.centers) / totals
    elif mode == "3coeff":
        values = peak_depths(flat, dc.grid)
    else:
        raise ConfigurationError(f"Unknown decode mode: {mode}")

    depth[present] = values
    return DepthImage(depth)


def _check_vector(c: np.ndarray, grid: BinGrid) -> np.ndarray:
    coeffs = ArrayValidator.require_finite(c, "coefficients").reshape(-1)
    if coeffs.shape[0] != grid.n_bins:
        raise ConfigurationError(f"expected {grid.n_bins} coefficients, got {coeffs.shape[0]}")
    if np.any(coeffs < 0):
        raise InvalidInputError("coefficients must be non-negative")
    if not np.any(coeffs > 0):
        raise MissingPixelError("all-zero coefficient vector has no depth")
    return coeffs


def peak_depths(coeffs: np.ndarray, grid: BinGrid) -> np.ndarray:
    """Vectorized peak decoding over an (M, N) array of non-zero coefficient rows."""
    k = np.argmax(coeffs, axis=1)  # first maximum, i.e. lowest index on ties
    padded = np.pad(coeffs, ((0, 0), (1, 1)))
    centers = np.pad(grid.centers, (1, 1))
    numerator = np.zeros(coeffs.shape[0])
    denominator = np.zeros(coeffs.shape[0])
    for offset in (0, 1, 2):  # k-1, k, k+1 in padded indexing
        index = (k + offset)[:, None]
        weight = np.take_along_axis(padded, index, axis=1)[:, 0]
        numerator += weight * centers[k + offset]
        denominator += weight
    return numerator / denominator
