"""
Run configuration: model, training and augmentation settings as one JSON document.
"""
import json
import logging
from pathlib import Path
from typing import Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from grid_field import Grid
from similarity import DEFAULT_LAMBDA, LccConfig

logger = logging.getLogger(__name__)

DEFAULT_SPACING_MM = 1.5
# Three stride-2 encoder stages.
GRID_DIVISOR = 8


class ConfigError(ValueError):
    """Missing, unreadable or invalid run configuration."""


def _check_odd(value: int, name: str) -> int:
    if value % 2 == 0:
        raise ValueError(f"{name} must be odd, got {value}")
    return value


class ModelConfig(BaseModel):
    """Network architecture and loss settings."""
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    latent_dim: int = Field(default=16, ge=1)
    lam: float = Field(default=DEFAULT_LAMBDA, gt=0, alias="lambda")
    sigma_s: float = Field(default=3.0, gt=0)
    smoothing_kernel: int = Field(default=15, ge=1)
    scaling_steps: int = Field(default=4, ge=0)
    lcc: LccConfig = Field(default_factory=LccConfig)
    encoder_widths: Tuple[int, int, int, int] = (16, 32, 32, 4)
    # dense bottleneck, three deconvolutions, two convolutions
    decoder_widths: Tuple[int, int, int, int, int, int] = (4, 32, 32, 16, 16, 16)
    weight_decay: float = Field(default=1e-4, ge=0)
    grid_dims: Tuple[int, ...] = (64, 64)
    spacing: Optional[Tuple[float, ...]] = None
    conv_kernel: int = Field(default=3, ge=1)
    leaky_slope: float = Field(default=0.2, ge=0)

    @field_validator("smoothing_kernel")
    @classmethod
    def _odd_smoothing(cls, value: int) -> int:
        return _check_odd(value, "smoothing_kernel")

    @field_validator("conv_kernel")
    @classmethod
    def _odd_conv(cls, value: int) -> int:
        return _check_odd(value, "conv_kernel")

    @field_validator("encoder_widths", "decoder_widths")
    @classmethod
    def _positive_widths(cls, value):
        if any(w < 1 for w in value):
            raise ValueError(f"channel widths must be >= 1, got {value}")
        return value

    @field_validator("grid_dims")
    @classmethod
    def _divisible_grid(cls, value):
        if len(value) not in (2, 3):
            raise ValueError(f"grid_dims must have 2 or 3 entries, got {value}")
        if any(n < GRID_DIVISOR or n % GRID_DIVISOR for n in value):
            raise ValueError(f"every grid extent must be a positive multiple of {GRID_DIVISOR}, got {value}")
        return value

    @model_validator(mode="after")
    def _spacing_matches_grid(self):
        if self.spacing is not None and len(self.spacing) != len(self.grid_dims):
            raise ValueError(f"spacing {self.spacing} does not match grid_dims {self.grid_dims}")
        return self

    @property
    def grid(self) -> Grid:
        spacing = self.spacing or (DEFAULT_SPACING_MM,) * len(self.grid_dims)
        return Grid(self.grid_dims, spacing)


class AugmentationConfig(BaseModel):
    """Ranges of the random spatial transform shared by both images of a pair."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    enabled: bool = True
    shift_fraction: float = Field(default=0.1, ge=0, lt=0.5)
    rotation_degrees: float = Field(default=15.0, ge=0, le=180)
    scale_range: float = Field(default=0.1, ge=0, lt=1)
    mirror_axes: Tuple[int, ...] = (0, 1)
    mirror_probability: float = Field(default=0.5, ge=0, le=1)


class TrainConfig(BaseModel):
    """Optimizer and loop settings."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = Field(default=0.0005, gt=0)
    batch_size: int = Field(default=1, ge=1)
    epochs: int = Field(default=20, ge=1)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    seed: int = 0
    checkpoint_every: int = Field(default=1000, ge=1)
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    record_wall_time: bool = True


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)


def _describe(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"]) or "<root>"
    return f"{location}: {first['msg']}"


def parse_run_config(document: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"invalid run config, {_describe(e)}") from e


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    config = parse_run_config(document)
    logger.info(f"loaded run config {path}")
    return config


def dump_run_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    document = config.model_dump(mode="json", by_alias=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
