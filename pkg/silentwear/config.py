"""Configuration management for the SilentWear pipeline."""

import json
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from silentwear.emgio import Condition
from silentwear.errors import ConfigError


class StrictModel(BaseModel):
    """Base for config sections; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")


class SynthSpec(StrictModel):
    """Synthetic dataset generator parameters.

    Counts are validated by the generator itself (``InvalidSpec``) so that a
    bad spec is reported as a data error rather than a config parse error.
    """

    n_subjects: int = Field(default=4)
    n_sessions: int = Field(default=3)
    n_batches: int = Field(default=5)
    reps_per_command: int = Field(default=20)
    fs_hz: int = Field(default=500)
    n_channels: int = Field(default=14)
    session_shift_strength: float = Field(default=0.0, ge=0.0)
    conditions: List[Condition] = Field(
        default_factory=lambda: [Condition.VOCALIZED, Condition.SILENT]
    )
    production_s: float = Field(default=2.0, gt=0.0)
    rest_s: float = Field(default=1.5, gt=0.0)
    lead_s: float = Field(default=1.0, ge=0.0)
    signal_amplitude: float = Field(default=1.0, gt=0.0)
    noise_floor: float = Field(default=0.1, ge=0.0)
    mains_amplitude: float = Field(default=0.5, ge=0.0)
    drift_amplitude: float = Field(default=1.0, ge=0.0)


class SpeechNetConfig(StrictModel):
    """SpeechNet hyperparameters."""

    n_channels: int = Field(default=14)
    n_classes: int = Field(default=9)
    batchnorm: bool = Field(default=True)
    bn_momentum: float = Field(default=0.1, gt=0.0, le=1.0)
    bn_eps: float = Field(default=1e-5, gt=0.0)


class PlateauConfig(StrictModel):
    """Reduce-on-plateau scheduler, driven by validation loss."""

    patience: int = Field(default=2, ge=1)
    factor: float = Field(default=0.1, gt=0.0, lt=1.0)
    min_lr: float = Field(default=1e-6, ge=0.0)
    threshold: float = Field(default=1e-4, ge=0.0)


class EarlyStopConfig(StrictModel):
    """Early stopping on validation loss."""

    patience: int = Field(default=10, ge=1)
    restore_best: bool = Field(default=True)


class TrainConfig(StrictModel):
    """Full training run, used for every from-scratch model."""

    lr0: float = Field(default=1e-3, ge=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    max_epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=32, ge=1)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    plateau: PlateauConfig = Field(default_factory=PlateauConfig)
    early_stop: EarlyStopConfig = Field(default_factory=EarlyStopConfig)
    val_fraction: float = Field(default=0.15, gt=0.0, lt=1.0)
    freeze_bn_stats: bool = Field(default=False)
    seed: int = Field(default=0, ge=0)


class FineTuneConfig(TrainConfig):
    """Incremental fine-tuning on one new batch; BN statistics stay frozen."""

    max_epochs: int = Field(default=50, ge=1)
    freeze_bn_stats: bool = Field(default=True)
    train_per_class: int = Field(default=14, ge=1)
    val_per_class: int = Field(default=6, ge=1)


class QuantConfig(StrictModel):
    """Post-training quantization calibration."""

    n_calibration: int = Field(default=512, ge=1)
    min_calibration: int = Field(default=64, ge=1)


class StreamConfig(StrictModel):
    """Sliding-window streaming classifier."""

    window_ms: int = Field(default=800, gt=0)
    step_ms: int = Field(default=100, gt=0)
    fs_hz: int = Field(default=500, gt=0)
    model_path: Optional[str] = Field(default=None)

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.fs_hz / 1000))

    @property
    def step_samples(self) -> int:
        return int(round(self.step_ms * self.fs_hz / 1000))

    @model_validator(mode="after")
    def _check_grid(self) -> "StreamConfig":
        if self.step_ms > self.window_ms:
            raise ValueError("step_ms must not exceed window_ms")
        if self.window_samples < 128:
            raise ValueError("window must span at least 128 samples")
        if self.step_samples < 1:
            raise ValueError("step must span at least one sample")
        return self


class EvalConfig(StrictModel):
    """Evaluation harness defaults."""

    window_ms: int = Field(default=1400, gt=0)
    ablation_sizes: List[int] = Field(
        default_factory=lambda: [400, 600, 800, 1000, 1200, 1400]
    )
    jobs: int = Field(default=1, ge=1)


class RunConfig(StrictModel):
    """Merged view of one JSON/YAML config file plus command-line flags."""

    seed: int = Field(default=0, ge=0)
    out_dir: Optional[str] = Field(default=None)
    synth: SynthSpec = Field(default_factory=SynthSpec)
    model: SpeechNetConfig = Field(default_factory=SpeechNetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    fine_tune: FineTuneConfig = Field(default_factory=FineTuneConfig)
    quant: QuantConfig = Field(default_factory=QuantConfig)
    stream: StreamConfig = Field(default_factory=StreamConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


class Settings(BaseSettings):
    """Environment defaults (``SILENTWEAR_*`` variables or a ``.env`` file)."""

    model_config = SettingsConfigDict(
        env_prefix="SILENTWEAR_", env_file=".env", extra="ignore"
    )

    out_dir: str = Field(default="runs")
    registry: str = Field(default="data/silentwear.db")
    log_level: str = Field(default="INFO")


class ConfigManager:
    """Load and save run configuration files (JSON or YAML)."""

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        self.config_path = Path(config_path) if config_path else None
        self._config: Optional[RunConfig] = None

    def load(self) -> RunConfig:
        """Load configuration from file; a missing path yields defaults."""
        config_data = {}
        if self.config_path is not None:
            if not self.config_path.exists():
                raise ConfigError(f"config file not found: {self.config_path}")
            try:
                config_data = yaml.safe_load(
                    self.config_path.read_text(encoding="utf-8")
                ) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {self.config_path}: {e}") from e
            if not isinstance(config_data, dict):
                raise ConfigError(f"{self.config_path}: top level must be a mapping")

        self._config = validate_config(config_data)
        return self._config

    def save(self, config: RunConfig) -> None:
        """Save configuration to file, format chosen by suffix."""
        if self.config_path is None:
            raise ConfigError("no config path to save to")
        config_dict = config.model_dump(mode="json")
        with open(self.config_path, "w", encoding="utf-8") as f:
            if self.config_path.suffix == ".json":
                json.dump(config_dict, f, indent=2)
                f.write("\n")
            else:
                yaml.dump(config_dict, f, allow_unicode=True, sort_keys=False)
        self._config = config

    def get_config(self) -> RunConfig:
        """Get current configuration, loading if necessary."""
        if self._config is None:
            return self.load()
        return self._config


def validate_config(data: dict) -> RunConfig:
    """Validate a raw mapping into a ``RunConfig``."""
    try:
        return RunConfig(**data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{where}: {first['msg']}") from e


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-key overrides (``{"train.max_epochs": 5}``) and revalidate."""
    data = config.model_dump(mode="json")
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    return validate_config(data)


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Get environment settings."""
    return Settings()
