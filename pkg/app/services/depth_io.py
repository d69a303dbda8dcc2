"""
Depth I/O Service
Reads and writes 16-bit PNG depth maps (value / 256 m, 0 = missing), a simple binary
tensor format for coefficient images and model parameters, and point lists as CSV.
Also simulates lower-resolution Lidar by keeping evenly spaced rings and projects
points into a pinhole camera.
"""

import csv
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, model_validator

from app.services.dc_codec import BinGrid, DCImage, DepthImage
from app.utils import (
    ArrayValidator,
    DegenerateInputError,
    FormatError,
    InvalidInputError,
    atomic_write_bytes,
    atomic_write_text,
    csv_text,
)

logger = logging.getLogger(__name__)

PNG_DEPTH_SCALE = 256.0
TENSOR_MAGIC = b"DCT1"


class Camera(BaseModel):
    """Pinhole intrinsics in pixels plus the image size."""

    model_config = ConfigDict(frozen=True)

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @model_validator(mode="after")
    def _check(self) -> "Camera":
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        return self


@dataclass
class PointList:
    """M x 3 points in meters with optional ring indices 0..R-1."""

    xyz: np.ndarray
    ring: Optional[np.ndarray] = None
    num_rings: Optional[int] = None

    def __post_init__(self):
        self.xyz = ArrayValidator.require_finite(self.xyz, "point coordinates").reshape(-1, 3)
        if self.ring is not None:
            self.ring = np.asarray(self.ring, dtype=np.int64).reshape(-1)
            if self.ring.shape[0] != self.xyz.shape[0]:
                raise InvalidInputError("ring indices must match the number of points")
            if np.any(self.ring < 0):
                raise InvalidInputError("ring indices must be non-negative")
            if self.num_rings is not None and np.any(self.ring >= self.num_rings):
                raise InvalidInputError(f"ring index exceeds ring count {self.num_rings}")

    def __len__(self) -> int:
        return int(self.xyz.shape[0])

    def select(self, keep: np.ndarray) -> "PointList":
        ring = None if self.ring is None else self.ring[keep]
        return PointList(self.xyz[keep], ring, self.num_rings)


@dataclass
class ProjectionResult:
    """Projected depth image plus the counts of dropped points."""

    image: DepthImage
    n_projected: int
    n_behind: int
    n_outside: int


# ==================== PNG16 depth ====================

def depth_to_png_values(img: DepthImage) -> np.ndarray:
    """Quantize meters to the stored uint16 values (round to nearest, 0 stays missing)."""
    stored = np.rint(img.depth * PNG_DEPTH_SCALE)
    if np.any(stored > np.iinfo(np.uint16).max):
        raise InvalidInputError(f"depth above {65535 / PNG_DEPTH_SCALE} m cannot be stored in PNG16")
    stored[~img.valid] = 0
    return stored.astype(np.uint16)


def write_depth_png16(img: DepthImage, path: Path) -> None:
    """
    Write a depth image as a single-channel 16-bit PNG (value = depth * 256).

    Args:
        img: Depth image in meters
        path: Destination file (written atomically)
    """
    buffer = io.BytesIO()
    Image.fromarray(depth_to_png_values(img)).save(buffer, format="PNG")
    atomic_write_bytes(Path(path), buffer.getvalue())
    logger.debug(f"Wrote {img.width}x{img.height} depth PNG to {path}")


def read_depth_png16(path: Path) -> DepthImage:
    """
    Read a single-channel 16-bit PNG depth map.

    Returns:
        DepthImage with depth = stored / 256 and 0 meaning missing

    Raises:
        FormatError: If the file is not a 16-bit single-channel PNG
    """
    try:
        with Image.open(path) as image:
            if image.format != "PNG":
                raise FormatError(f"{path} is not a PNG file")
            if image.mode not in ("I;16", "I;16B", "I;16L", "I"):
                raise FormatError(f"{path} has mode {image.mode}, expected 16-bit single channel")
            values = np.array(image)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path} is not a readable image") from exc
    if values.ndim != 2:
        raise FormatError(f"{path} must have a single channel")
    if values.min() < 0 or values.max() > np.iinfo(np.uint16).max:
        raise FormatError(f"{path} holds values outside the 16-bit range")
    return DepthImage(values.astype(np.float64) / PNG_DEPTH_SCALE)


def read_png16_values(path: Path) -> np.ndarray:
    """Raw stored uint16 values of a depth PNG."""
    return depth_to_png_values(read_depth_png16(path))


def write_gray_pgm(values: np.ndarray, path: Path) -> None:
    """Write an 8-bit grayscale PGM (P5) from values already scaled to 0..255."""
    buffer = io.BytesIO()
    Image.fromarray(np.clip(np.rint(values), 0, 255).astype(np.uint8), mode="L").save(buffer, format="PPM")
    atomic_write_bytes(Path(path), buffer.getvalue())


# ==================== Binary tensor file ====================

def encode_tensors(arrays: Sequence[np.ndarray]) -> bytes:
    """
    Serialize tensors: magic, uint32 count, then per tensor uint32 ndim,
    uint64 dims and row-major little-endian float64 data.
    """
    parts = [TENSOR_MAGIC, struct.pack("<I", len(arrays))]
    for array in arrays:
        array = np.asarray(array, dtype=np.float64)
        parts.append(struct.pack("<I", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(np.ascontiguousarray(array).astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def decode_tensors(payload: bytes) -> List[np.ndarray]:
    """Inverse of encode_tensors."""
    if payload[:4] != TENSOR_MAGIC:
        raise FormatError("not a tensor file (bad magic)")
    try:
        offset = 4
        (count,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}Q", payload, offset)
            offset += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            end = offset + 8 * size
            if end > len(payload):
                raise FormatError("tensor file truncated")
            data = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64)
            arrays.append(data.reshape(shape))
            offset = end
    except struct.error as exc:
        raise FormatError(f"malformed tensor header: {exc}") from exc
    if offset != len(payload):
        raise FormatError("trailing bytes after last tensor")
    return arrays


def write_tensors(path: Path, arrays: Sequence[np.ndarray]) -> None:
    atomic_write_bytes(Path(path), encode_tensors(arrays))


def read_tensors(path: Path) -> List[np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def write_tensor(path: Path, array: np.ndarray) -> None:
    write_tensors(path, [array])


def read_tensor(path: Path) -> np.ndarray:
    arrays = read_tensors(path)
    if len(arrays) != 1:
        raise FormatError(f"{path} holds {len(arrays)} tensors, expected 1")
    return arrays[0]


# ==================== Point lists ====================

def read_points_csv(path: Path, num_rings: Optional[int] = None) -> PointList:
    """
    Read points from CSV with columns x,y,z[,ring] (a header line is optional).

    Raises:
        FormatError: If a row does not have 3 or 4 numeric columns
    """
    xyz: List[List[float]] = []
    rings: List[int] = []
    with open(path, newline="") as handle:
        for line_no, row in enumerate(csv.reader(handle), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            if line_no == 1 and row[0].strip().lower() == "x":
                continue
            if len(row) not in (3, 4):
                raise FormatError(f"{path}:{line_no}: expected x,y,z[,ring], got {len(row)} columns")
            try:
                xyz.append([float(v) for v in row[:3]])
                if len(row) == 4:
                    rings.append(int(row[3]))
            except ValueError as exc:
                raise FormatError(f"{path}:{line_no}: {exc}") from exc
    if rings and len(rings) != len(xyz):
        raise FormatError(f"{path}: ring column present on some rows only")
    ring = np.array(rings, dtype=np.int64) if rings else None
    return PointList(np.array(xyz, dtype=np.float64).reshape(-1, 3), ring, num_rings)


def write_points_csv(points: PointList, path: Path) -> None:
    header = ["x", "y", "z"] + (["ring"] if points.ring is not None else [])
    rows: Iterable[List[object]]
    if points.ring is None:
        rows = points.xyz.tolist()
    else:
        rows = [p + [int(r)] for p, r in zip(points.xyz.tolist(), points.ring.tolist())]
    atomic_write_text(Path(path), csv_text(header, rows))


def subsample_rows(
    points: PointList, every: Optional[int] = None, rings: Optional[Iterable[int]] = None
) -> PointList:
    """
    Keep the points of selected rings: every k-th ring starting at 0, or an explicit set.

    64 rings with every=4 keep rings {0, 4, ..., 60}; every=1 is the identity.

    Raises:
        InvalidInputError: If points lack ring indices or the selection is ill-formed
    """
    if points.ring is None:
        raise InvalidInputError("ring indices are required for row subsampling")
    if (every is None) == (rings is None):
        raise InvalidInputError("give exactly one of every or rings")
    if every is not None:
        if every < 1:
            raise InvalidInputError("every must be at least 1")
        keep = points.ring % every == 0
    else:
        keep = np.isin(points.ring, np.fromiter(rings, dtype=np.int64))
    selected = points.select(keep)
    logger.info(f"Row subsampling kept {len(selected)} of {len(points)} points")
    return selected


def estimate_rings_from_elevation(points: PointList, num_rings: int) -> PointList:
    """
    Assign rings by uniform binning of elevation asin(z / |p|) between the observed extremes.

    Points are in the sensor frame with z up.

    Raises:
        DegenerateInputError: If every point has the same elevation
    """
    if num_rings < 2:
        raise InvalidInputError("num_rings must be at least 2")
    norms = np.linalg.norm(points.xyz, axis=1)
    if np.any(norms == 0):
        raise InvalidInputError("points at the sensor origin have no elevation")
    elevation = np.arcsin(np.clip(points.xyz[:, 2] / norms, -1.0, 1.0))
    low, high = float(elevation.min()), float(elevation.max())
    if high - low <= 1e-12:
        raise DegenerateInputError("all points share one elevation; rings cannot be estimated")
    ring = np.floor((elevation - low) / (high - low) * num_rings).astype(np.int64)
    ring = np.clip(ring, 0, num_rings - 1)
    return PointList(points.xyz, ring, num_rings)


def lidar_to_camera_axes(points: PointList) -> PointList:
    """Permute Lidar axes (x forward, y left, z up) to camera axes (x right, y down, z forward)."""
    x, y, z = points.xyz[:, 0], points.xyz[:, 1], points.xyz[:, 2]
    return PointList(np.stack([-y, -z, x], axis=1), points.ring, points.num_rings)


# ==================== Projection ====================

def project_points(points: PointList, cam: Camera) -> ProjectionResult:
    """
    Project camera-frame points; the nearest depth wins on collisions.

    Points with z <= 0 or landing outside the image are dropped and counted.
    """
    xyz = points.xyz
    in_front = xyz[:, 2] > 0
    xyz = xyz[in_front]
    u = np.floor(cam.fx * xyz[:, 0] / xyz[:, 2] + cam.cx + 0.5).astype(np.int64)
    v = np.floor(cam.fy * xyz[:, 1] / xyz[:, 2] + cam.cy + 0.5).astype(np.int64)
    inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)

    depth = np.full((cam.height, cam.width), np.inf)
    np.minimum.at(depth, (v[inside], u[inside]), xyz[inside, 2])
    depth[np.isinf(depth)] = 0.0

    result = ProjectionResult(
        image=DepthImage(depth),
        n_projected=int(np.count_nonzero(inside)),
        n_behind=int(np.count_nonzero(~in_front)),
        n_outside=int(np.count_nonzero(~inside)),
    )
    logger.info(
        f"Projected {result.n_projected} points "
        f"(dropped {result.n_behind} behind camera, {result.n_outside} outside image)"
    )
    return result


def project_to_depth_image(points: PointList, cam: Camera) -> DepthImage:
    """Sparse depth image from camera-frame points (see project_points for drop rules)."""
    return project_points(points, cam).image


def back_project(img: DepthImage, cam: Camera) -> PointList:
    """Camera-frame points for every present pixel center."""
    v, u = np.nonzero(img.valid)
    d = img.depth[v, u]
    x = (u - cam.cx) * d / cam.fx
    y = (v - cam.cy) * d / cam.fy
    return PointList(np.stack([x, y, d], axis=1))


def crop_top_rows(img: DepthImage, rows: int) -> DepthImage:
    """Drop the top rows of an image (regions the sensor never covers)."""
    if rows < 0 or rows >= img.height:
        raise InvalidInputError(f"cannot crop {rows} rows from an image of height {img.height}")
    return DepthImage(img.depth[rows:])


# ==================== DC images ====================

def write_dc_image(dc: DCImage, path: Path) -> None:
    """Store a DC image as two tensors: the grid (d_min, d_max, N) and the H x W x N data."""
    grid = np.array([dc.grid.d_min, dc.grid.d_max, float(dc.grid.n_bins)])
    write_tensors(path, [grid, dc.data])


def read_dc_image(path: Path) -> DCImage:
    arrays = read_tensors(path)
    if len(arrays) != 2 or arrays[0].shape != (3,):
        raise FormatError(f"{path} is not a DC image file (expected grid and data tensors)")
    d_min, d_max, n_bins = arrays[0]
    if n_bins != int(n_bins):
        raise FormatError(f"{path}: bin count {n_bins} is not an integer")
    grid = BinGrid(d_min=float(d_min), d_max=float(d_max), n_bins=int(n_bins))
    return DCImage(data=arrays[1], grid=grid)
