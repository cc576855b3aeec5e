import json
import logging
from pathlib import Path
from typing import Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .constants import ConfigError, ID_SHAPES, OOD_SHAPES, STRIDES

logger = logging.getLogger(__name__)


def _describe(error: ValidationError) -> str:
    """Flatten a pydantic error into one line naming every offending key."""
    parts = []
    for item in error.errors():
        key = ".".join(str(part) for part in item.get("loc", ())) or "<root>"
        parts.append(f"'{key}': {item.get('msg')}")
    return "Invalid configuration " + "; ".join(parts)


class StrictModel(BaseModel):
    """Base for all configuration models: unknown keys are rejected, instances are immutable."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    @classmethod
    def parse(cls, **data):
        """Validate untrusted data, reporting failures as one ConfigError with dotted key paths."""
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(_describe(e)) from e


class SplitCounts(StrictModel):
    train: int = Field(2000, ge=0)
    val: int = Field(200, ge=0)
    test_id: int = Field(500, ge=0)
    test_ood: int = Field(500, ge=0)


class DatasetSpec(StrictModel):
    """Everything the scene generator needs; generation is a pure function of this."""
    seed: int = Field(42, ge=0, lt=2 ** 64)
    image_size: int = Field(160, ge=32)
    counts: SplitCounts = SplitCounts()
    num_classes: int = Field(4, ge=1)
    objects_per_scene: Tuple[int, int] = (1, 4)
    size_range: Tuple[float, float] = (0.15, 0.45)
    id_shapes: Tuple[str, ...] = ID_SHAPES
    ood_shapes: Tuple[str, ...] = OOD_SHAPES
    distractor_probability: float = Field(0.3, ge=0.0, le=1.0)
    base_gray: float = Field(0.5, ge=0.0, le=1.0)
    noise_amplitude: float = Field(0.05, ge=0.0, le=0.2)
    color_jitter: float = Field(0.1, ge=0.0, le=0.5)

    @model_validator(mode="after")
    def _check(self) -> "DatasetSpec":
        self.check_shapes()
        low, high = self.objects_per_scene
        if not 1 <= low <= high:
            raise ConfigError(f"objects_per_scene must satisfy 1 <= low <= high, got {self.objects_per_scene}")
        small, large = self.size_range
        if not 0.0 < small <= large <= 1.0:
            raise ConfigError(f"size_range must satisfy 0 < low <= high <= 1, got {self.size_range}")
        return self

    def check_shapes(self) -> None:
        if not self.id_shapes:
            raise ConfigError("id_shapes must not be empty")
        if not self.ood_shapes and self.counts.test_ood > 0:
            raise ConfigError("ood_shapes must not be empty when counts.test_ood > 0")
        unknown = [s for s in self.id_shapes + self.ood_shapes if s not in ID_SHAPES + OOD_SHAPES]
        if unknown:
            raise ConfigError(f"id_shapes/ood_shapes contain unknown shapes: {unknown}")
        overlap = set(self.id_shapes) & set(self.ood_shapes)
        if overlap:
            raise ConfigError(f"id_shapes and ood_shapes must be disjoint, both contain {sorted(overlap)}")
        if self.num_classes > len(self.id_shapes):
            raise ConfigError(f"num_classes={self.num_classes} exceeds the {len(self.id_shapes)} id_shapes")

    @property
    def class_shapes(self) -> Tuple[str, ...]:
        return self.id_shapes[:self.num_classes]


class NetworkConfig(StrictModel):
    image_size: int = Field(160, ge=32)
    strides: Tuple[int, int, int] = STRIDES
    widths: Tuple[int, int, int, int, int] = (16, 32, 64, 96, 128)
    head_width: int = Field(64, ge=1)
    num_classes: int = Field(4, ge=1)
    leaky_slope: float = Field(0.1, gt=0.0, lt=1.0)

    @field_validator("image_size")
    @classmethod
    def _divisible(cls, v: int) -> int:
        if v % 32:
            raise ValueError("must be divisible by 32")
        return v

    @field_validator("strides")
    @classmethod
    def _fixed_strides(cls, v: Tuple[int, int, int]) -> Tuple[int, int, int]:
        # The backbone is a fixed five-stage pyramid tapped at these strides
        if tuple(v) != STRIDES:
            raise ValueError(f"must be {list(STRIDES)}")
        return v

    @field_validator("widths")
    @classmethod
    def _positive_widths(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(w < 1 for w in v):
            raise ValueError("all widths must be positive")
        return v

    @property
    def grid_sizes(self) -> Tuple[int, ...]:
        return tuple(self.image_size // s for s in self.strides)

    @property
    def num_candidates(self) -> int:
        return sum(g * g for g in self.grid_sizes)


class ResponsibilityConfig(StrictModel):
    p: Tuple[float, float, float] = (0.0, 0.1, 0.5)

    @field_validator("p")
    @classmethod
    def _unit_interval(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(not 0.0 <= pk <= 1.0 for pk in v):
            raise ValueError("each p_k must lie in [0, 1]")
        return v

    @property
    def is_sweep_valid(self) -> bool:
        """True for (0,0,0) or strictly increasing triplets (p3 > p2 > p1)."""
        p1, p2, p3 = self.p
        return self.p == (0.0, 0.0, 0.0) or p3 > p2 > p1


class TrainConfig(StrictModel):
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=1)
    seed: int = Field(42, ge=0, lt=2 ** 64)
    lr_backbone: float = Field(1e-4, gt=0.0)
    lr_heads: float = Field(1e-3, gt=0.0)
    plateau_factor: float = Field(0.1, gt=0.0, lt=1.0)
    plateau_patience: int = Field(2, ge=1)
    mode: Literal["yolood", "flat"] = "yolood"
    resume_from: Optional[str] = None
    progress: bool = False

    @model_validator(mode="after")
    def _check_rates(self) -> "TrainConfig":
        if self.lr_backbone > self.lr_heads:
            raise ConfigError(f"lr_backbone ({self.lr_backbone}) must not exceed lr_heads ({self.lr_heads})")
        return self


class SweepConfig(StrictModel):
    p_grid: Tuple[Tuple[float, float, float], ...] = ((0.0, 0.0, 0.0), (0.0, 0.1, 0.5), (0.0, 0.5, 1.0))
    epochs: int = Field(5, ge=1)
    top_k: int = Field(20, ge=1)


class EvalConfig(StrictModel):
    methods: Tuple[str, ...] = ("yolood",)
    target_tpr: float = Field(0.95, gt=0.0, le=1.0)


class RunConfig(StrictModel):
    dataset: DatasetSpec = DatasetSpec()
    network: NetworkConfig = NetworkConfig()
    train: TrainConfig = TrainConfig()
    responsibility: ResponsibilityConfig = ResponsibilityConfig()
    sweep: SweepConfig = SweepConfig()
    eval: EvalConfig = EvalConfig()
    output_dir: str = "runs/gridood"
    dataset_dir: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self) -> "RunConfig":
        if self.dataset.image_size != self.network.image_size:
            raise ConfigError(f"dataset.image_size ({self.dataset.image_size}) must equal "
                              f"network.image_size ({self.network.image_size})")
        if self.dataset.num_classes != self.network.num_classes:
            raise ConfigError(f"dataset.num_classes ({self.dataset.num_classes}) must equal "
                              f"network.num_classes ({self.network.num_classes})")
        return self


class Settings:
    """ Loads a JSON run configuration, with overrides, into a RunConfig """

    DEFAULTS: dict = RunConfig().model_dump(mode="json")

    @staticmethod
    def read_settings(path: str | Path, overrides: Sequence[str] = ()) -> RunConfig:
        """Read the settings file and return the validated configuration.

        Args:
            path: JSON document holding a (possibly partial) RunConfig.
            overrides: ``key=value`` strings applied on top of the file, dotted keys
                reach nested sections (``train.epochs=2``).

        Raises:
            ConfigError: Whenever the file is not valid JSON, a key is unknown or a
                value is invalid. When the file does not exist, a default settings
                file is written in its place first.

        Returns:
            RunConfig: The validated configuration.
        """
        path = Path(path)
        try:
            with open(path, "r") as f:
                settings = json.loads(f.read())
        except FileNotFoundError:
            Settings.write_default_settings_file(path)
            raise ConfigError(f"Settings file {path} was missing; a default one was written, please review it.")
        except ValueError as e:
            logger.error(f"Error in settings file {path}: {e}")
            raise ConfigError(f"Error in settings file {path}: {e}")

        if not isinstance(settings, dict):
            raise ConfigError(f"Settings file {path} must hold a JSON object")

        for override in overrides:
            Settings.apply_override(settings, override)

        return RunConfig.parse(**settings)

    @staticmethod
    def apply_override(settings: dict, override: str) -> None:
        """Apply one ``key=value`` override in place; the value is parsed as JSON when possible."""
        key, sep, raw = override.partition("=")
        if not sep or not key:
            raise ConfigError(f"Override {override!r} must look like key=value")
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw

        target = settings
        *parents, leaf = key.split(".")
        for part in parents:
            child = target.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Override key '{key}' goes through non-section '{part}'")
            target = child
        target[leaf] = value

    @staticmethod
    def write_default_settings_file(path: str | Path) -> None:
        """Create a settings file with default values."""
        Settings.write_settings_file(path, Settings.DEFAULTS)

    @staticmethod
    def write_settings_file(path: str | Path, settings: dict) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            f.write(json.dumps(settings, indent=4, separators=(",", ": ")))
