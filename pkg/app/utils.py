"""
Utility functions for validation, error handling, and atomic file output.
"""

import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np


class DepthCoefficientsError(Exception):
    """Base class for every error raised by the toolkit. Carries a CLI exit code."""

    exit_code: int = 1


class InvalidInputError(DepthCoefficientsError):
    """Non-finite, non-positive or otherwise unusable input values."""

    exit_code = 3


class DepthRangeError(DepthCoefficientsError):
    """Depth outside the encodable range of a bin grid."""

    exit_code = 4


class MissingPixelError(DepthCoefficientsError):
    """An all-zero coefficient vector was used where a depth is required."""

    exit_code = 5


class NormalizationError(DepthCoefficientsError):
    """Coefficients do not sum to one within tolerance."""

    exit_code = 6


class EmptyMaskError(DepthCoefficientsError):
    """No pixel is present in every image taking part in a reduction."""

    exit_code = 7


class InvalidGroundTruthError(DepthCoefficientsError):
    """Ground-truth depth unusable for relative or inverse metrics."""

    exit_code = 8


class FormatError(DepthCoefficientsError):
    """Malformed file (wrong PNG mode, bad tensor header, bad CSV)."""

    exit_code = 9


class InvalidSpecError(DepthCoefficientsError):
    """Scene specification violating its invariants."""

    exit_code = 10


class InvalidPatternError(DepthCoefficientsError):
    """Sample pattern that cannot be realized on the given image."""

    exit_code = 11


class ConfigurationError(DepthCoefficientsError):
    """Shape or configuration mismatch."""

    exit_code = 12


class TrainingDivergedError(DepthCoefficientsError):
    """Training produced a non-finite loss."""

    exit_code = 13

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"Training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class DegenerateInputError(DepthCoefficientsError):
    """Input without the spread an operation needs (e.g. a single elevation)."""

    exit_code = 14


MISSING_FILE_EXIT_CODE = 15


def at_pixel(error: DepthCoefficientsError, row: int, col: int) -> DepthCoefficientsError:
    """
    Re-create a per-pixel error with its image coordinates attached.

    Args:
        error: Error raised for a single pixel
        row: Pixel row
        col: Pixel column

    Returns:
        Error of the same class whose message names the pixel
    """
    wrapped = type(error)(f"pixel ({row}, {col}): {error}")
    wrapped.row = row
    wrapped.col = col
    return wrapped


class ArrayValidator:
    """Validates numeric inputs shared by the services."""

    @staticmethod
    def require_finite(values: np.ndarray, name: str = "values") -> np.ndarray:
        """
        Ensure every entry is finite.

        Raises:
            InvalidInputError: If any entry is NaN or infinite
        """
        array = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise InvalidInputError(f"{name} must be finite")
        return array

    @staticmethod
    def require_positive(value: float, name: str) -> float:
        """Ensure a scalar parameter is finite and strictly positive."""
        if not np.isfinite(value) or value <= 0:
            raise InvalidInputError(f"{name} must be a positive finite number, got {value}")
        return float(value)

    @staticmethod
    def require_same_shape(a: np.ndarray, b: np.ndarray, what: str = "images") -> None:
        """Ensure two arrays share a shape."""
        if a.shape != b.shape:
            raise ConfigurationError(f"{what} have different shapes: {a.shape} vs {b.shape}")

    @staticmethod
    def first_index(mask: np.ndarray) -> Tuple[int, ...]:
        """Return the first True index of a boolean array (row-major)."""
        return tuple(int(i) for i in np.argwhere(mask)[0])


def error_line(error: BaseException) -> str:
    """One-line diagnostic for the CLI."""
    kind = type(error).__name__
    message = " ".join(str(error).split())
    return f"{kind}: {message}" if message else kind


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """
    Write a file atomically: temp file in the target directory, then rename.

    Args:
        path: Destination path
        payload: File contents
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    """Atomic text write (UTF-8)."""
    atomic_write_bytes(path, text.encode("utf-8"))


def csv_text(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    """
    Render rows as CSV text with a header line.

    Floats are written with repr precision so values survive a round trip.
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(cell) for cell in row])
    return buffer.getvalue()


def format_cell(value: object) -> str:
    """Format a CSV cell; floats keep full precision, None becomes empty."""
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def parse_optional_floats(text: str) -> list:
    """
    Parse a comma-separated list where empty, 'nan' or 'none' entries mean missing.

    Args:
        text: e.g. "2,2,,6,6" or "2,2,nan,6,6"

    Returns:
        List of floats and None

    Raises:
        InvalidInputError: If a token is neither a number nor a missing marker
    """
    values: list = []
    for token in text.split(","):
        token = token.strip().lower()
        if token in ("", "nan", "none", "missing"):
            values.append(None)
            continue
        try:
            values.append(float(token))
        except ValueError as exc:
            raise InvalidInputError(f"cannot parse {token!r} in {text!r} as a depth") from exc
    return values


def format_float(value: Optional[float], digits: int = 4) -> str:
    """Format a float for human-readable tables."""
    if value is None:
        return "-"
    return f"{value:.{digits}f}"
