"""Configuration for stpf.

Values resolve in this order, first match wins:
  1. Explicit command-line flags (``--seed``, ``--epochs``, ``--window`` ...)
  2. A run configuration document (``--config run.json``; YAML also accepted)
  3. Environment variables (``STPF_THREADS``, ``STPF_DATA_DIR``, ``STPF_OUT_DIR`` ...)
  4. Field defaults

``Settings`` holds the process-level knobs read from the environment.
``RunConfig`` describes one pipeline run and owns the derived file paths.

The exception hierarchy shared by every module lives here as well.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from stpf.models import CellKind, Precision, Property, Scheme

# Source workflow: 300 of 360 monthly frames train the model.
DEFAULT_TRAIN_FRACTION = 300 / 360
DEFAULT_WINDOW = 10
DEFAULT_EPOCHS = 30
DEFAULT_BATCH = 5
DEFAULT_SEED = 42

# Every property in the order ``--all`` visits them.
ALL_PROPERTIES = (Property.PRESSURE, Property.OIL_SAT, Property.GAS_SAT, Property.WATER_SAT)


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class StpfError(Exception):
    """Base class for every error raised by stpf."""


class InputError(StpfError):
    """Bad input from the user: files, flags, shapes or configuration."""


class ConfigurationError(InputError):
    """A configuration value is out of range or inconsistent."""


class UsageError(InputError):
    """An operation was called outside its preconditions."""


class DimensionError(InputError):
    """Tensor or frame shapes do not conform."""


class DegenerateRangeError(InputError):
    """A value range collapsed to a single point (max == min)."""


class SpecMismatchError(InputError):
    """A checkpoint does not match the data it is applied to."""


class FormatError(InputError):
    """A binary file is malformed. ``offset`` is the byte where parsing stopped."""

    def __init__(self, message: str, offset: int) -> None:
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class NumericError(StpfError):
    """A computation produced NaN or Inf."""


class MissingGradientError(StpfError):
    """A gradient was requested for a tensor the graph never reached."""


# ---------------------------------------------------------------------------
# Process settings
# ---------------------------------------------------------------------------


class Settings(BaseSettings):
    """Process-level settings read from ``STPF_*`` environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="STPF_",
        extra="ignore",
        populate_by_name=True,
    )

    threads: int = Field(
        default=1,
        ge=1,
        description="Upper bound on worker threads used for metric evaluation.",
    )
    data_dir: Path = Field(
        default=Path("data"),
        description="Directory holding FRMS frame stacks.",
    )
    out_dir: Path = Field(
        default=Path("runs"),
        description="Directory receiving checkpoints, predictions and reports.",
    )
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = Field(
        default="WARNING",
        description="Root log level when no -v flag is given.",
    )


def get_settings() -> Settings:
    """Return Settings resolved from the environment."""
    try:
        return Settings()
    except ValidationError as exc:
        raise ConfigurationError(f"invalid STPF_* environment setting: {exc}") from exc


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


class TrainConfig(BaseModel):
    """Optimizer and loop settings for one training run."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=DEFAULT_EPOCHS, ge=1)
    batch: int = Field(default=DEFAULT_BATCH, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    epsilon: float = Field(default=1e-7, gt=0)
    seed: int = DEFAULT_SEED
    loss: Literal["mse"] = "mse"
    precision: Precision = Precision.SINGLE


class SSIMConfig(BaseModel):
    """Stabilisation constants for the global SSIM.

    When ``c1``/``c2`` are unset they derive from the data range:
    c1 = (k1 * range)^2, c2 = (k2 * range)^2.
    """

    model_config = ConfigDict(extra="forbid")

    k1: float = Field(default=0.01, gt=0)
    k2: float = Field(default=0.03, gt=0)
    c1: float | None = None
    c2: float | None = None
    data_range: float | None = None
    region: Literal["active", "rectangle"] = "active"

    def constants(self, data_range: float | None = None) -> tuple[float, float]:
        """Return (c1, c2), both strictly positive."""
        span = self.data_range if self.data_range is not None else data_range
        if self.c1 is not None and self.c2 is not None:
            c1, c2 = self.c1, self.c2
        else:
            if span is None or span <= 0:
                raise DegenerateRangeError(
                    f"SSIM data range must be positive to derive c1/c2, got {span}"
                )
            c1 = self.c1 if self.c1 is not None else (self.k1 * span) ** 2
            c2 = self.c2 if self.c2 is not None else (self.k2 * span) ** 2
        if c1 <= 0 or c2 <= 0:
            raise ConfigurationError(f"SSIM constants must be positive, got c1={c1}, c2={c2}")
        return c1, c2


class SynthConfig(BaseModel):
    """Synthetic masked reservoir generator settings.

    Unset grid, frame count and well lists come from the preset: ``desk``
    (16x8, 120 frames) or ``field`` (34x16, 360 frames).
    """

    model_config = ConfigDict(extra="forbid")

    preset: Literal["desk", "field"] = "desk"
    height: int | None = Field(default=None, ge=1)
    width: int | None = Field(default=None, ge=1)
    frames: int | None = Field(default=None, ge=1)
    notch: int | None = Field(default=None, ge=0)
    mask: list[list[int]] | None = None
    injectors: list[tuple[int, int]] | None = None
    producers: list[tuple[int, int]] | None = None
    cycle_period: int = Field(default=12, ge=2)
    alpha: float = 0.2
    source_strength: float = Field(default=0.04, ge=0)
    pressure_rate: float = Field(default=15.0, ge=0)
    initial_pressure: float = Field(default=2000.0, gt=0)
    pressure_noise: float = Field(default=20.0, ge=0)
    initial_saturation: tuple[float, float, float] = (0.75, 0.05, 0.20)
    saturation_noise: float = Field(default=0.02, ge=0)
    seed: int = DEFAULT_SEED


class RunConfig(BaseModel):
    """One pipeline run: where the data lives and how to train and evaluate."""

    model_config = ConfigDict(extra="forbid")

    data_dir: Path = Path("data")
    out_dir: Path = Path("runs")
    property: Property = Property.PRESSURE
    window: int = Field(default=DEFAULT_WINDOW, ge=2)
    train_frames: int | None = Field(default=None, ge=1)
    train_fraction: float = Field(default=DEFAULT_TRAIN_FRACTION, gt=0, lt=1)
    scheme: Scheme = Scheme.OVERLAPPING
    stride: int = Field(default=1, ge=1)
    horizon: int | None = Field(default=None, ge=0)
    cell_kind: CellKind = CellKind.CONVLSTM
    seed: int = DEFAULT_SEED
    train: TrainConfig = Field(default_factory=TrainConfig)
    ssim: SSIMConfig = Field(default_factory=SSIMConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)

    def resolve_train_frames(self, total: int) -> int:
        """Chronological split point for a stack of ``total`` frames."""
        if self.train_frames is not None:
            return self.train_frames
        return int(round(total * self.train_fraction))

    # --- Derived paths ---

    def frames_path(self, prop: Property) -> Path:
        return self.data_dir / f"{prop.value}.frms"

    def model_dir(self, prop: Property) -> Path:
        return self.out_dir / prop.value

    def checkpoint_path(self, prop: Property) -> Path:
        return self.model_dir(prop) / "model.stpf"

    def loss_csv_path(self, prop: Property) -> Path:
        return self.model_dir(prop) / "loss.csv"

    def prediction_path(self, prop: Property, mode: str) -> Path:
        return self.model_dir(prop) / f"pred-{mode}.frms"

    def report_dir(self, prop: Property, mode: str) -> Path:
        return self.model_dir(prop) / f"eval-{mode}"


def load_run_config(
    path: Path | None = None,
    settings: Settings | None = None,
    overrides: dict[str, Any] | None = None,
) -> RunConfig:
    """Build a RunConfig from an optional document plus flag overrides.

    ``overrides`` uses dotted keys for nested models (``train.epochs``).
    Paths missing from the document fall back to the environment settings.
    """
    settings = settings or get_settings()
    doc: dict[str, Any] = {}
    if path is not None:
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except UnicodeDecodeError as exc:
            raise ConfigurationError(
                f"config {path} is not valid UTF-8 (at byte offset {exc.start})"
            ) from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config {path} must hold a mapping at the top level")
        doc = loaded

    doc.setdefault("data_dir", str(settings.data_dir))
    doc.setdefault("out_dir", str(settings.out_dir))

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        target = doc
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = target.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"config key '{key}' must be a mapping")
            target = node
        target[leaf] = value

    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid run configuration: {exc}") from exc
