"""Core data models for stpf.

Plain dataclasses for in-memory representations. On disk frame stacks are FRMS
files and trained networks are STPF checkpoints (see parser.py).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class Property(str, Enum):
    """Reservoir properties, one model per property."""

    PRESSURE = "pressure"
    OIL_SAT = "oil_sat"
    GAS_SAT = "gas_sat"
    WATER_SAT = "water_sat"

    @property
    def is_saturation(self) -> bool:
        return self is not Property.PRESSURE


class Scheme(str, Enum):
    """Sample generation schemes.

    overlapping     input [i, i+L-1], output [i+1, i+L]
    nonoverlapping  input [i, i+L-1], output [i+L, i+2L-1]
    """

    OVERLAPPING = "overlapping"
    NONOVERLAPPING = "nonoverlapping"


class CellKind(str, Enum):
    CONVLSTM = "convlstm"
    STLSTM = "stlstm"


class Precision(str, Enum):
    SINGLE = "float32"
    DOUBLE = "float64"


class NormKind(str, Enum):
    MINMAX = "minmax"
    IDENTITY = "identity"


# ---------------------------------------------------------------------------
# Frame stacks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FrameStack:
    """A time series of 2-D property maps over a masked H x W grid.

    Frames are stored as read-only float32 [T, H, W]; inactive cells are
    forced to 0.0 on construction.
    """

    property: Property
    frames: np.ndarray
    mask: np.ndarray
    time_unit: str = "months"

    def __post_init__(self) -> None:
        from stpf.config import DimensionError

        mask = np.asarray(self.mask, dtype=bool)
        frames = np.asarray(self.frames, dtype=np.float32)
        if mask.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {mask.shape}")
        if frames.ndim == 2 and frames.size == 0:
            frames = frames.reshape(0, *mask.shape)
        if frames.ndim != 3 or frames.shape[1:] != mask.shape:
            raise DimensionError(
                f"frames shape {frames.shape} does not match mask shape {mask.shape}"
            )
        frames = np.where(mask, frames, np.float32(0.0)).astype(np.float32)
        frames.setflags(write=False)
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "property", Property(self.property))
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "mask", mask)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def n_active(self) -> int:
        return int(self.mask.sum())

    def active_values(self) -> np.ndarray:
        """All active-cell values, shape [T, n_active]."""
        return self.frames[:, self.mask]

    def with_frames(self, frames: np.ndarray) -> FrameStack:
        """Same property and mask, new frames."""
        return replace(self, frames=frames)

    def slice(self, start: int, stop: int) -> FrameStack:
        return self.with_frames(self.frames[start:stop])


@dataclass(frozen=True)
class NormalizationSpec:
    """How a property was scaled into [0, 1] for training."""

    property: Property
    kind: NormKind
    min: float | None = None
    max: float | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "min": self.min, "max": self.max}

    @classmethod
    def from_dict(cls, prop: Property, data: dict) -> NormalizationSpec:
        return cls(property=prop, kind=NormKind(data["kind"]), min=data.get("min"),
                   max=data.get("max"))


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    """One input/output window pair, as frame indices."""

    input_start: int
    output_start: int
    length: int

    @property
    def input_indices(self) -> range:
        return range(self.input_start, self.input_start + self.length)

    @property
    def output_indices(self) -> range:
        return range(self.output_start, self.output_start + self.length)


@dataclass(frozen=True)
class SampleSet:
    """Windows cut from a frame stack of ``frame_count`` frames."""

    scheme: Scheme
    window: int
    stride: int
    frame_count: int
    samples: tuple[Sample, ...] = ()

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def is_empty(self) -> bool:
        return not self.samples


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("frame", "mse", "rmse", "nrmse_pct", "ssim")


@dataclass(frozen=True)
class MetricRecord:
    frame: int
    mse: float
    rmse: float
    nrmse_pct: float
    ssim: float


@dataclass
class MetricSeries:
    """Per-frame errors over a horizon, ordered by frame index."""

    records: list[MetricRecord] = field(default_factory=list)
    denormalized: bool = True

    def __len__(self) -> int:
        return len(self.records)

    def mean(self, column: str, first: int | None = None) -> float:
        """Mean of ``column`` over all records, or the first ``first`` of them."""
        rows = self.records if first is None else self.records[:first]
        if not rows:
            return float("nan")
        return float(np.mean([getattr(r, column) for r in rows]))

    def to_csv(self) -> str:
        lines = [",".join(METRIC_COLUMNS)]
        for r in self.records:
            values = (float(r.mse), float(r.rmse), float(r.nrmse_pct), float(r.ssim))
            lines.append(f"{int(r.frame)}," + ",".join(repr(v) for v in values))
        return "\n".join(lines) + "\n"
