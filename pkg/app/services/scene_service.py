"""
Scene Service
Synthetic ground-truth scenes with depth discontinuities: a planar background with
rectangular planar objects in front of it, rendered front-most-wins, plus the sparse
sampling patterns (uniform random, every k-th row, row-and-column grid) that turn
them into depth-completion inputs.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.ndimage import gaussian_filter

from app.services.dc_codec import BinGrid, DepthImage
from app.utils import (
    ArrayValidator,
    FormatError,
    InvalidPatternError,
    InvalidSpecError,
    atomic_write_text,
)

logger = logging.getLogger(__name__)

PatternKind = Literal["uniform", "rows", "grid"]

BACKGROUND_INTENSITY = 0.2


class PlanarField(BaseModel):
    """Depth base + slope_x * col + slope_y * row, with (row, col) relative to the field origin."""

    model_config = ConfigDict(frozen=True)

    base: float
    slope_x: float = 0.0
    slope_y: float = 0.0

    def evaluate(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return self.base + self.slope_x * cols + self.slope_y * rows


class RectObject(BaseModel):
    """Axis-aligned rectangle [top, top+height) x [left, left+width) carrying a planar depth."""

    model_config = ConfigDict(frozen=True)

    top: int = Field(ge=0)
    left: int = Field(ge=0)
    height: int = Field(gt=0)
    width: int = Field(gt=0)
    surface: PlanarField


class SceneSpec(BaseModel):
    """Synthetic scene description. Later objects are drawn over earlier ones where they are nearer."""

    model_config = ConfigDict(frozen=True)

    height: int = Field(gt=0)
    width: int = Field(gt=0)
    background: PlanarField
    objects: Tuple[RectObject, ...] = ()
    noise_sigma: float = Field(default=0.0, ge=0.0)
    seed: int = 0
    guide_blur: float = Field(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def _objects_inside(self) -> "SceneSpec":
        for i, obj in enumerate(self.objects):
            if obj.top + obj.height > self.height or obj.left + obj.width > self.width:
                raise ValueError(f"object {i} extends beyond the {self.height}x{self.width} image")
        return self


class SamplePattern(BaseModel):
    """
    Sparse sampling pattern.

    kind "uniform" keeps `count` random valid pixels; "rows" keeps every `step`-th row
    starting at `offset`; "grid" keeps pixels on every `step`-th row and column.
    """

    model_config = ConfigDict(frozen=True)

    kind: PatternKind
    count: Optional[int] = Field(default=None, gt=0)
    step: Optional[int] = Field(default=None, gt=0)
    offset: int = Field(default=0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_parameters(self) -> "SamplePattern":
        if self.kind == "uniform" and self.count is None:
            raise ValueError("uniform pattern needs count")
        if self.kind in ("rows", "grid") and self.step is None:
            raise ValueError(f"{self.kind} pattern needs step")
        return self


@dataclass
class SceneSample:
    """One rendered training or evaluation scene."""

    spec: SceneSpec
    gt: DepthImage
    sparse: DepthImage
    guide: np.ndarray
    labels: np.ndarray


def build_scene_spec(**fields) -> SceneSpec:
    """Construct a SceneSpec, reporting validation failures as InvalidSpecError."""
    try:
        return SceneSpec(**fields)
    except ValidationError as exc:
        raise InvalidSpecError(str(exc)) from exc


def build_pattern(**fields) -> SamplePattern:
    """Construct a SamplePattern, reporting validation failures as InvalidPatternError."""
    try:
        return SamplePattern(**fields)
    except ValidationError as exc:
        raise InvalidPatternError(str(exc)) from exc


# ==================== Rendering ====================

def _pixel_grid(spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)


def _object_depth(obj: RectObject) -> np.ndarray:
    rows, cols = np.mgrid[0 : obj.height, 0 : obj.width].astype(np.float64)
    return obj.surface.evaluate(rows, cols)


def validate_spec(spec: SceneSpec, grid: Optional[BinGrid] = None) -> None:
    """
    Check the scene invariants that depend on depth values.

    Objects must be strictly in front of the background over their footprint and
    every surface must lie inside the grid's encodable range (or be positive without a grid).

    Raises:
        InvalidSpecError: On the first violation found
    """
    rows, cols = _pixel_grid(spec)
    background = spec.background.evaluate(rows, cols)
    low = grid.encodable_min if grid is not None else np.finfo(np.float64).tiny
    high = grid.encodable_max if grid is not None else np.inf

    if background.min() < low or background.max() > high:
        raise InvalidSpecError(
            f"background depth spans [{background.min():.3f}, {background.max():.3f}], outside [{low}, {high}]"
        )
    for i, obj in enumerate(spec.objects):
        depth = _object_depth(obj)
        footprint = background[obj.top : obj.top + obj.height, obj.left : obj.left + obj.width]
        if depth.min() < low or depth.max() > high:
            raise InvalidSpecError(
                f"object {i} depth spans [{depth.min():.3f}, {depth.max():.3f}], outside [{low}, {high}]"
            )
        if np.any(depth >= footprint):
            raise InvalidSpecError(f"object {i} is not in front of the background over its footprint")


def _composite(spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Noise-free depth and label map (0 = background, i + 1 = object i)."""
    rows, cols = _pixel_grid(spec)
    depth = spec.background.evaluate(rows, cols)
    labels = np.zeros((spec.height, spec.width), dtype=np.int64)
    for i, obj in enumerate(spec.objects):
        window = (slice(obj.top, obj.top + obj.height), slice(obj.left, obj.left + obj.width))
        surface = _object_depth(obj)
        nearer = surface < depth[window]
        depth[window] = np.where(nearer, surface, depth[window])
        labels[window] = np.where(nearer, i + 1, labels[window])
    return depth, labels


def render(spec: SceneSpec, grid: Optional[BinGrid] = None) -> DepthImage:
    """
    Render a dense ground-truth depth image.

    Gaussian surface noise (noise_sigma) is drawn from the spec seed and the result
    is clipped to the grid's encodable range (or kept positive without a grid).

    Raises:
        InvalidSpecError: If the spec violates its invariants
    """
    validate_spec(spec, grid)
    depth, _ = _composite(spec)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        depth = depth + rng.normal(0.0, spec.noise_sigma, size=depth.shape)
        if grid is not None:
            depth = grid.clamp(depth)
        else:
            depth = np.maximum(depth, 1e-6)
    return DepthImage(depth)


def render_labels(spec: SceneSpec) -> np.ndarray:
    """Index of the visible surface per pixel (0 = background)."""
    return _composite(spec)[1]


def object_intensity(index: int) -> float:
    """Guide intensity of surface `index` (0 = background); spread by the golden ratio."""
    if index == 0:
        return BACKGROUND_INTENSITY
    return 0.35 + 0.6 * ((index * 0.6180339887) % 1.0)


def render_guide(spec: SceneSpec) -> np.ndarray:
    """
    Grayscale guide image in [0, 1]: one intensity per visible surface, blurred by guide_blur.
    """
    labels = render_labels(spec)
    lookup = np.array([object_intensity(i) for i in range(len(spec.objects) + 1)])
    guide = lookup[labels]
    if spec.guide_blur > 0:
        guide = gaussian_filter(guide, sigma=spec.guide_blur, mode="nearest")
    return np.clip(guide, 0.0, 1.0)


def discontinuity_mask(gt: DepthImage, t: float) -> np.ndarray:
    """Pixels with a present 4-neighbor whose depth differs by more than t."""
    ArrayValidator.require_positive(t, "t")
    depth = gt.depth
    valid = gt.valid
    mask = np.zeros(depth.shape, dtype=bool)
    # Vertical then horizontal neighbor pairs
    for axis in (0, 1):
        a = [slice(None), slice(None)]
        b = [slice(None), slice(None)]
        a[axis] = slice(None, -1)
        b[axis] = slice(1, None)
        a, b = tuple(a), tuple(b)
        jump = valid[a] & valid[b] & (np.abs(depth[a] - depth[b]) > t)
        mask[a] |= jump
        mask[b] |= jump
    return mask


def spec_discontinuities(spec: SceneSpec, t: float) -> np.ndarray:
    """Discontinuity set of the noise-free scene."""
    return discontinuity_mask(DepthImage(_composite(spec)[0]), t)


# ==================== Sampling ====================

def pattern_mask(pattern: SamplePattern, gt: DepthImage) -> np.ndarray:
    """
    Pixels selected by a pattern on a ground-truth image (only present pixels are selectable).

    Raises:
        InvalidPatternError: If a uniform pattern asks for more pixels than are present
    """
    valid = gt.valid
    mask = np.zeros(valid.shape, dtype=bool)
    if pattern.kind == "uniform":
        candidates = np.flatnonzero(valid)
        if pattern.count > candidates.size:
            raise InvalidPatternError(
                f"cannot draw {pattern.count} samples from {candidates.size} present pixels"
            )
        rng = np.random.default_rng(pattern.seed)
        chosen = rng.choice(candidates, size=pattern.count, replace=False)
        mask.flat[chosen] = True
        return mask
    if pattern.offset >= gt.height:
        raise InvalidPatternError(f"offset {pattern.offset} is beyond the image height {gt.height}")
    mask[pattern.offset :: pattern.step, :] = True
    if pattern.kind == "grid":
        columns = np.zeros(gt.width, dtype=bool)
        columns[pattern.offset :: pattern.step] = True
        mask &= columns[None, :]
    return mask & valid


def sample(gt: DepthImage, pattern: SamplePattern) -> DepthImage:
    """
    Sparse depth image keeping exactly the patterned subset of a ground truth.

    Raises:
        InvalidPatternError: If the pattern cannot be realized on the image
    """
    mask = pattern_mask(pattern, gt)
    sparse = np.where(mask, gt.depth, 0.0)
    logger.debug(f"{pattern.kind} pattern kept {int(mask.sum())} of {gt.height * gt.width} pixels")
    return DepthImage(sparse)


# ==================== Spec files ====================

def _floats(value: str, key: str, expected: Tuple[int, ...]) -> List[float]:
    try:
        numbers = [float(v) for v in value.split()]
    except ValueError as exc:
        raise FormatError(f"{key}: {exc}") from exc
    if len(numbers) not in expected:
        raise FormatError(f"{key}: expected {' or '.join(map(str, expected))} numbers, got {len(numbers)}")
    return numbers


def parse_scene_spec(text: str) -> SceneSpec:
    """
    Parse a key = value scene file.

    Keys: height, width, noise_sigma, seed, guide_blur,
    background = base [slope_x slope_y],
    object = top left height width base [slope_x slope_y] (repeatable, drawn in order).
    Blank lines and '#' comments are ignored.
    """
    fields: Dict[str, object] = {}
    objects: List[RectObject] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {line_no}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key in ("height", "width", "seed"):
                fields[key] = int(value)
            elif key in ("noise_sigma", "guide_blur"):
                fields[key] = float(value)
            elif key == "background":
                base, *slopes = _floats(value, key, (1, 3))
                fields[key] = PlanarField(base=base, slope_x=slopes[0] if slopes else 0.0,
                                          slope_y=slopes[1] if slopes else 0.0)
            elif key == "object":
                numbers = _floats(value, key, (5, 7))
                top, left, height, width = (int(v) for v in numbers[:4])
                slope_x, slope_y = numbers[5:7] if len(numbers) == 7 else (0.0, 0.0)
                objects.append(RectObject(
                    top=top, left=left, height=height, width=width,
                    surface=PlanarField(base=numbers[4], slope_x=slope_x, slope_y=slope_y),
                ))
            else:
                raise InvalidSpecError(f"line {line_no}: unknown key '{key}'")
        except ValueError as exc:
            # pydantic ValidationError is a ValueError too
            raise InvalidSpecError(f"line {line_no}: {exc}") from exc
    missing = [k for k in ("height", "width", "background") if k not in fields]
    if missing:
        raise InvalidSpecError(f"scene file lacks {', '.join(missing)}")
    return build_scene_spec(objects=tuple(objects), **fields)


def dump_scene_spec(spec: SceneSpec) -> str:
    """Inverse of parse_scene_spec."""
    bg = spec.background
    lines = [
        f"height = {spec.height}",
        f"width = {spec.width}",
        f"background = {bg.base!r} {bg.slope_x!r} {bg.slope_y!r}",
    ]
    for obj in spec.objects:
        s = obj.surface
        lines.append(
            f"object = {obj.top} {obj.left} {obj.height} {obj.width} {s.base!r} {s.slope_x!r} {s.slope_y!r}"
        )
    lines += [
        f"noise_sigma = {spec.noise_sigma!r}",
        f"seed = {spec.seed}",
        f"guide_blur = {spec.guide_blur!r}",
    ]
    return "\n".join(lines) + "\n"


def load_scene_spec(path: Path) -> SceneSpec:
    return parse_scene_spec(Path(path).read_text(encoding="utf-8"))


def save_scene_spec(spec: SceneSpec, path: Path) -> None:
    atomic_write_text(Path(path), dump_scene_spec(spec))


# ==================== Random scenes ====================

def random_scene_spec(
    rng: np.random.Generator,
    grid: BinGrid,
    height: int = 32,
    width: int = 32,
    max_objects: int = 3,
    noise_sigma: float = 0.0,
    guide_blur: float = 1.0,
) -> SceneSpec:
    """
    Draw a scene whose surfaces stay inside the grid's encodable range.

    The background occupies the far part of the range and objects the near part, so
    every object is in front of the background by construction.
    """
    low, high = grid.encodable_min, grid.encodable_max
    span = high - low
    # Background stays above 60 % of the range, objects below 30 %
    bg_tilt = 0.05 * span
    bg_base = rng.uniform(low + 0.6 * span + 2 * bg_tilt, high - 2 * bg_tilt)
    background = PlanarField(
        base=float(bg_base - bg_tilt),
        slope_x=float(rng.uniform(-1.0, 1.0) * bg_tilt / max(width - 1, 1)),
        slope_y=float(rng.uniform(0.0, 2.0) * bg_tilt / max(height - 1, 1)),
    )
    objects = []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        obj_h = int(rng.integers(max(2, height // 6), max(3, height // 2) + 1))
        obj_w = int(rng.integers(max(2, width // 6), max(3, width // 2) + 1))
        obj_tilt = 0.05 * span
        objects.append(RectObject(
            top=int(rng.integers(0, height - obj_h + 1)),
            left=int(rng.integers(0, width - obj_w + 1)),
            height=obj_h,
            width=obj_w,
            surface=PlanarField(
                base=float(rng.uniform(low + 0.05 * span, low + 0.3 * span - obj_tilt)),
                slope_x=float(rng.uniform(0.0, 1.0) * obj_tilt / max(obj_w - 1, 1)),
                slope_y=0.0,
            ),
        ))
    return build_scene_spec(
        height=height,
        width=width,
        background=background,
        objects=tuple(objects),
        noise_sigma=noise_sigma,
        seed=int(rng.integers(0, 2**31 - 1)),
        guide_blur=guide_blur,
    )


def make_scene_sample(spec: SceneSpec, pattern: SamplePattern, grid: BinGrid) -> SceneSample:
    gt = render(spec, grid)
    return SceneSample(
        spec=spec,
        gt=gt,
        sparse=sample(gt, pattern),
        guide=render_guide(spec),
        labels=render_labels(spec),
    )


def generate_dataset(
    n_scenes: int,
    seed: int,
    grid: BinGrid,
    pattern: SamplePattern,
    height: int = 32,
    width: int = 32,
    noise_sigma: float = 0.0,
) -> List[SceneSample]:
    """
    Render a seeded list of scenes with their sparse inputs and guides.

    Uniform patterns are re-seeded per scene from the scene seed so each scene gets its own draw.
    """
    if n_scenes < 1:
        raise InvalidSpecError("a dataset needs at least one scene")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_scenes):
        spec = random_scene_spec(rng, grid, height, width, noise_sigma=noise_sigma)
        scene_pattern = pattern.model_copy(update={"seed": spec.seed}) if pattern.kind == "uniform" else pattern
        samples.append(make_scene_sample(spec, scene_pattern, grid))
    logger.info(f"Generated {n_scenes} scenes of {height}x{width} (seed={seed}, pattern={pattern.kind})")
    return samples
