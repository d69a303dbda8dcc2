"""
Experiment Service
Desk-scale experiments on the toy model: the four-way input/loss ablation
(sparse depth or DC in, MSE or cross-entropy out), a Lidar-sparsity sweep over
row-subsampling steps, and a sweep over the number of depth bins.
"""

import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.config import settings
from app.services.analysis_service import mixed_pixel_mask
from app.services.dc_codec import BinGrid, DecodeMode, DepthImage, decode_image
from app.services.metrics_service import MetricReport, evaluate
from app.services.scene_service import SamplePattern, SceneSample, generate_dataset
from app.services.toy_model import (
    InputMode,
    LossMode,
    OptimizerKind,
    ToyModelParams,
    TrainConfig,
    build_input,
    predict_coefficients,
    predict_depth,
    train,
)
from app.utils import ConfigurationError, csv_text, format_cell, format_float

logger = logging.getLogger(__name__)

ABLATION_RUNS: Tuple[Tuple[InputMode, LossMode], ...] = (
    ("sp", "mse"),
    ("dc", "mse"),
    ("sp", "ce"),
    ("dc", "ce"),
)


class ExperimentConfig(BaseModel):
    """Data split, schedule and evaluation settings shared by every run of an experiment."""

    model_config = ConfigDict(frozen=True)

    seed: int = 0
    n_train: int = Field(default=settings.TOY_N_TRAIN, gt=0)
    n_eval: int = Field(default=settings.TOY_N_EVAL, gt=0)
    height: int = Field(default=settings.TOY_HEIGHT, ge=8)
    width: int = Field(default=settings.TOY_WIDTH, ge=8)
    row_step: int = Field(default=settings.TOY_ROW_STEP, gt=0)
    noise_sigma: float = Field(default=0.0, ge=0.0)
    t: float = Field(default=settings.TOY_T, gt=0)
    window_radius: int = Field(default=settings.MIXED_WINDOW_RADIUS, ge=0)
    epochs: int = Field(default=settings.TOY_EPOCHS, gt=0)
    learning_rate: float = Field(default=settings.TOY_LEARNING_RATE, gt=0)
    batch_size: int = Field(default=settings.TOY_BATCH_SIZE, gt=0)
    optimizer: OptimizerKind = "adam"
    lr_halving_epochs: Optional[int] = Field(default=None, gt=0)
    hidden_channels: int = Field(default=settings.TOY_HIDDEN_CHANNELS, gt=0)
    use_guide: bool = True
    workers: int = Field(default=settings.TRAIN_WORKERS, ge=1)

    def train_config(self, input_mode: InputMode, loss_mode: LossMode) -> TrainConfig:
        return TrainConfig(
            input_mode=input_mode,
            loss_mode=loss_mode,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            optimizer=self.optimizer,
            lr_halving_epochs=self.lr_halving_epochs,
            hidden_channels=self.hidden_channels,
            use_guide=self.use_guide,
            workers=self.workers,
        )


@dataclass
class ExperimentTable:
    """Rows of an experiment report keyed by their first column."""

    header: List[str]
    rows: List[List[object]]

    def to_csv(self) -> str:
        return csv_text(self.header, self.rows)

    def column(self, name: str) -> List[object]:
        index = self.header.index(name)
        return [row[index] for row in self.rows]

    def value(self, key: object, name: str) -> object:
        index = self.header.index(name)
        for row in self.rows:
            if row[0] == key:
                return row[index]
        raise KeyError(key)

    def format_table(self) -> str:
        """Aligned plain-text rendering for the console."""
        cells = [self.header] + [
            [format_float(c) if isinstance(c, float) else format_cell(c) for c in row] for row in self.rows
        ]
        widths = [max(len(str(row[i])) for row in cells) for i in range(len(self.header))]
        return "\n".join("  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in cells)


@dataclass
class ModelEvaluation:
    report: MetricReport
    mixed_pixel_rate: float


def row_pattern(step: int) -> SamplePattern:
    return SamplePattern(kind="rows", step=step)


def make_splits(
    config: ExperimentConfig, grid: BinGrid, pattern: Optional[SamplePattern] = None
) -> Tuple[List[SceneSample], List[SceneSample]]:
    """Seeded, disjoint train and eval scene lists (row pattern with config.row_step by default)."""
    pattern = pattern or row_pattern(config.row_step)
    train_seed, eval_seed = (int(s) for s in np.random.SeedSequence(config.seed).generate_state(2))
    common = dict(grid=grid, pattern=pattern, height=config.height, width=config.width,
                  noise_sigma=config.noise_sigma)
    return (
        generate_dataset(config.n_train, train_seed, **common),
        generate_dataset(config.n_eval, eval_seed, **common),
    )


def predict_scene(params: ToyModelParams, scene: SceneSample, decode: DecodeMode = "3coeff") -> DepthImage:
    x = build_input(scene.sparse, params.grid, params.input_mode, scene.guide if params.use_guide else None)
    if params.loss_mode == "ce":
        return decode_image(predict_coefficients(params, x), mode=decode)
    return predict_depth(params, x)


def evaluate_model(
    params: ToyModelParams,
    scenes: Sequence[SceneSample],
    t: float,
    window_radius: int,
    decode: DecodeMode = "3coeff",
) -> ModelEvaluation:
    """
    Metrics over all pixels of all scenes (pixel-weighted) plus the mixed-pixel rate.

    Scenes are stacked for the metrics; mixed pixels are counted per scene so windows
    never straddle two scenes.
    """
    if not scenes:
        raise ConfigurationError("evaluation needs at least one scene")
    preds = [predict_scene(params, s, decode) for s in scenes]
    report = evaluate(
        DepthImage(np.vstack([p.depth for p in preds])),
        DepthImage(np.vstack([s.gt.depth for s in scenes])),
        t,
    )
    mixed = 0
    counted = 0
    for pred, scene in zip(preds, scenes):
        flags, evaluated = mixed_pixel_mask(pred, scene.gt, t, window_radius)
        mixed += int(flags.sum())
        counted += int(evaluated.sum())
    return ModelEvaluation(report=report, mixed_pixel_rate=mixed / counted)


def run_ablation(
    train_scenes: Sequence[SceneSample],
    eval_scenes: Sequence[SceneSample],
    grid: BinGrid,
    config: ExperimentConfig,
) -> ExperimentTable:
    """
    Train and evaluate SP/MSE, DC/MSE, SP/CE and DC/CE on a common split and seed.

    Cross-entropy heads are reconstructed with peak (3-coefficient) decoding.

    Returns:
        ExperimentTable with one row per configuration
    """
    header = ["config", "input", "loss", "mae", "rmse", "tmae", "trmse", "mixed_pixel_rate", "final_loss"]
    rows = []
    for input_mode, loss_mode in ABLATION_RUNS:
        train_config = config.train_config(input_mode, loss_mode)
        result = train(train_config, train_scenes, grid)
        scores = evaluate_model(result.params, eval_scenes, config.t, config.window_radius)
        r = scores.report
        rows.append([train_config.name, input_mode, loss_mode, r.mae, r.rmse, r.tmae, r.trmse,
                     scores.mixed_pixel_rate, result.curve[-1]])
        logger.info(f"{train_config.name}: tMAE={r.tmae:.4f} tRMSE={r.trmse:.4f} "
                    f"mixed={scores.mixed_pixel_rate:.4f}")
    return ExperimentTable(header=header, rows=rows)


def ablation_for_seed(config: ExperimentConfig, grid: BinGrid) -> ExperimentTable:
    """Generate the split from config.seed and run the ablation."""
    train_scenes, eval_scenes = make_splits(config, grid)
    return run_ablation(train_scenes, eval_scenes, grid, config)


def dc_ce_ranks_best(table: ExperimentTable, metrics: Sequence[str] = ("tmae", "trmse", "mixed_pixel_rate")) -> bool:
    """True when DC/CE is strictly lowest on every listed metric."""
    best = {name: table.value("DC/CE", name) for name in metrics}
    for row in table.rows:
        if row[0] == "DC/CE":
            continue
        for name in metrics:
            if not best[name] < row[table.header.index(name)]:
                return False
    return True


def run_sparsity_sweep(
    config: ExperimentConfig, grid: BinGrid, steps: Sequence[int] = (1, 2, 4)
) -> ExperimentTable:
    """
    Train DC/CE on every row-subsampling step (same scenes, sparser input) and report
    both the peak and the full inner-product reconstruction.
    """
    header = ["row_step", "decode", "mae", "rmse", "tmae", "trmse", "mixed_pixel_rate"]
    rows = []
    for step in steps:
        train_scenes, eval_scenes = make_splits(config, grid, row_pattern(step))
        result = train(config.train_config("dc", "ce"), train_scenes, grid)
        for decode in ("3coeff", "all"):
            scores = evaluate_model(result.params, eval_scenes, config.t, config.window_radius, decode)
            r = scores.report
            rows.append([step, decode, r.mae, r.rmse, r.tmae, r.trmse, scores.mixed_pixel_rate])
        logger.info(f"Sparsity sweep: finished row step {step}")
    return ExperimentTable(header=header, rows=rows)


def run_bin_sweep(
    config: ExperimentConfig,
    d_min: float,
    d_max: float,
    bin_counts: Sequence[int] = (10, 20, 40),
) -> ExperimentTable:
    """
    Train DC/CE with different numbers of bins on the same scenes and time
    encoding plus inference per evaluation scene.

    Scenes are generated for the coarsest grid so every grid can encode them.
    """
    if not bin_counts:
        raise ConfigurationError("bin sweep needs at least one bin count")
    coarsest = BinGrid(d_min=d_min, d_max=d_max, n_bins=min(bin_counts))
    train_scenes, eval_scenes = make_splits(config, coarsest)
    header = ["n_bins", "bin_width", "mae", "rmse", "tmae", "trmse", "mixed_pixel_rate", "ms_per_scene"]
    rows = []
    for n_bins in bin_counts:
        grid = BinGrid(d_min=d_min, d_max=d_max, n_bins=n_bins)
        result = train(config.train_config("dc", "ce"), train_scenes, grid)
        start = time.perf_counter()
        for scene in eval_scenes:
            predict_scene(result.params, scene)
        elapsed_ms = 1000.0 * (time.perf_counter() - start) / len(eval_scenes)
        scores = evaluate_model(result.params, eval_scenes, config.t, config.window_radius)
        r = scores.report
        rows.append([n_bins, grid.b, r.mae, r.rmse, r.tmae, r.trmse, scores.mixed_pixel_rate, elapsed_ms])
        logger.info(f"Bin sweep: N={n_bins} tMAE={r.tmae:.4f} ({elapsed_ms:.2f} ms/scene)")
    return ExperimentTable(header=header, rows=rows)
