"""
Configuration management using Pydantic Settings.
Loads environment variables from .env file.
"""

from typing import List

from pydantic_settings import BaseSettings, SettingsConfigDict

class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    # Application
    APP_NAME: str = "Depth Coefficients Toolkit"
    APP_VERSION: str = "0.1.0"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_TO_FILE: bool = False  # Rotating files under LOG_DIR when enabled
    LOG_DIR: str = "logs"

    # Outdoor bin grid (one bin per meter up to 80 m)
    GRID_D_MIN: float = 0.0
    GRID_D_MAX: float = 80.0
    GRID_N_BINS: int = 80

    # Indoor bin grid (10 cm bins up to 8 m)
    INDOOR_GRID_D_MIN: float = 0.0
    INDOOR_GRID_D_MAX: float = 8.0
    INDOOR_GRID_N_BINS: int = 80

    # Evaluation
    THRESHOLD_T_OUTDOOR: float = 1.0  # meters
    THRESHOLD_T_INDOOR: float = 0.25  # meters
    DELTA_THRESHOLDS: List[float] = [1.02, 1.05, 1.10, 1.25, 1.5625]
    INVERSE_DEPTH_UNIT_SCALE: float = 1000.0  # 1/m -> 1/km

    # Loss numerics
    PROBABILITY_FLOOR: float = 1e-12
    NORMALIZATION_TOLERANCE: float = 1e-6

    # Mixed-pixel analysis
    MIXED_WINDOW_RADIUS: int = 2

    # Toy model (desk scale)
    TOY_HEIGHT: int = 32
    TOY_WIDTH: int = 32
    TOY_N_TRAIN: int = 64
    TOY_N_EVAL: int = 16
    TOY_EPOCHS: int = 200
    TOY_LEARNING_RATE: float = 1e-3
    TOY_BATCH_SIZE: int = 8
    TOY_HIDDEN_CHANNELS: int = 16
    TOY_GRID_D_MAX: float = 8.0
    TOY_N_BINS: int = 16
    TOY_T: float = 0.5
    TOY_ROW_STEP: int = 4
    TRAIN_WORKERS: int = 1  # >1 runs gradient shards on a thread pool
    TRAIN_SHARD_SIZE: int = 4  # scenes per stacked forward/backward pass


# Global settings instance
settings = Settings()
