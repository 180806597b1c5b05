"""Data models for the CT counterfactuals package."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

import numpy as np

from .const import (
    DEFAULT_BACKGROUND,
    DEFAULT_DEPTH,
    DEFAULT_GROWTH,
    DEFAULT_HEIGHT,
    DEFAULT_INTERIOR,
    DEFAULT_LAMBDA0,
    DEFAULT_MAX_STEPS,
    DEFAULT_NOISE,
    DEFAULT_PIXEL_BUDGET,
    DEFAULT_TARGET_FRACTION,
    DEFAULT_WIDTH,
)
from .exceptions import InvalidChunkError, InvalidValueError


class CFStatus(Enum):
    """Enum for how a counterfactual search ended."""

    CONVERGED = "Converged"
    PLATEAUED = "Plateaued"
    BUDGET_EXCEEDED = "BudgetExceeded"
    NO_REDUCTION = "NoReduction"


class ScorerKind(Enum):
    """Enum for volume scorer kinds."""

    SEG_SUM = "seg_sum"
    RIM_DETECTOR = "rim_detector"
    CONSTANT = "constant"
    LINEAR_PROBE = "linear_probe"


class Label(Enum):
    """Enum for phantom labels."""

    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass(frozen=True)
class ChunkSpec:
    """Contiguous slice range whose latents receive gradients."""

    start: int
    length: int

    def __post_init__(self):
        """Post-initialisation to reject empty or negative chunks."""
        if self.start < 0:
            raise InvalidChunkError(f"Chunk start must be >= 0, got {self.start}")
        if self.length < 1:
            raise InvalidChunkError(f"Chunk length must be >= 1, got {self.length}")

    @property
    def end(self) -> int:
        """Exclusive end index."""
        return self.start + self.length

    def contains(self, index: int) -> bool:
        """Check if a slice index lies in the chunk."""
        return self.start <= index < self.end

    def validate_for(self, depth: int) -> None:
        """Raise if the chunk leaves a volume of the given depth."""
        if self.end > depth:
            raise InvalidChunkError(
                f"Chunk [{self.start}, {self.end}) exceeds volume depth {depth}"
            )

    @classmethod
    def full(cls, depth: int) -> "ChunkSpec":
        """The chunk covering every slice."""
        return cls(start=0, length=depth)


@dataclass(frozen=True)
class SearchConfig:
    """Parameters of the geometric lambda search."""

    lambda0: float = DEFAULT_LAMBDA0
    growth: float = DEFAULT_GROWTH
    max_steps: int = DEFAULT_MAX_STEPS
    pixel_budget: float = DEFAULT_PIXEL_BUDGET
    target_fraction: float = DEFAULT_TARGET_FRACTION

    def __post_init__(self):
        """Post-initialisation to validate ranges."""
        if not self.lambda0 > 0:
            raise InvalidValueError(f"lambda0 must be > 0, got {self.lambda0}")
        if not self.growth > 1:
            raise InvalidValueError(f"growth must be > 1, got {self.growth}")
        if self.max_steps < 1:
            raise InvalidValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if not 0 < self.pixel_budget <= 1:
            raise InvalidValueError(
                f"pixel_budget must be in (0, 1], got {self.pixel_budget}"
            )
        if not 0 <= self.target_fraction < 1:
            raise InvalidValueError(
                f"target_fraction must be in [0, 1), got {self.target_fraction}"
            )

    def lambdas(self) -> list[float]:
        """The probe schedule lambda0 * growth**k."""
        return [self.lambda0 * self.growth**k for k in range(self.max_steps)]


@dataclass(frozen=True)
class TrainConfig:
    """Parameters of plain SGD training."""

    epochs: int
    batch_size: int
    learning_rate: float
    seed: int = 0

    def __post_init__(self):
        """Post-initialisation to validate ranges."""
        if self.epochs < 0:
            raise InvalidValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise InvalidValueError(
                f"learning_rate must be > 0, got {self.learning_rate}"
            )


@dataclass(frozen=True)
class TraceEntry:
    """One step of the lambda search."""

    lambda_: float
    prediction: float
    pixel_change: float
    over_budget: bool = False

    def as_dict(self) -> dict[str, Any]:
        """Return a JSON-ready dictionary."""
        return {
            "lambda": self.lambda_,
            "prediction": self.prediction,
            "pixel_change_fraction": self.pixel_change,
            "over_budget": self.over_budget,
        }


@dataclass
class CFResult:
    """Outcome of one counterfactual search."""

    cf_volume: np.ndarray
    lambda_star: float
    trace: list[TraceEntry]
    status: CFStatus
    baseline_prediction: float
    chunk: ChunkSpec

    @property
    def best_entry(self) -> TraceEntry:
        """The trace entry the counterfactual was decoded from."""
        return min(
            (e for e in self.trace if not e.over_budget),
            key=lambda e: e.prediction,
        )

    @property
    def min_prediction(self) -> float:
        """Prediction of the returned counterfactual."""
        return self.best_entry.prediction

    def as_dict(self) -> dict[str, Any]:
        """Return the JSON document (the volume is stored separately)."""
        best = self.best_entry
        return {
            "status": self.status.value,
            "lambda_star": self.lambda_star,
            "baseline": self.baseline_prediction,
            "min_prediction": best.prediction,
            "pixel_change_fraction": best.pixel_change,
            "chunk": {"start": self.chunk.start, "end": self.chunk.end},
            "trace": [entry.as_dict() for entry in self.trace],
        }


@dataclass(frozen=True)
class ScanEntry:
    """Result of the counterfactual search restricted to one window."""

    start: int
    end: int
    baseline_prediction: float
    min_prediction: float
    status: CFStatus

    @property
    def reduction(self) -> float:
        """Prediction drop achieved inside this window."""
        return self.baseline_prediction - self.min_prediction


@dataclass
class ScanReport:
    """Chunk-by-chunk scan of a volume."""

    chunk_size: int
    stride: int
    entries: list[ScanEntry]
    results: list[CFResult] = field(default_factory=list, repr=False)

    @property
    def best_index(self) -> int:
        """Index of the window with the largest reduction; ties go to the first."""
        best = 0
        for i, entry in enumerate(self.entries):
            if entry.reduction > self.entries[best].reduction:
                best = i
        return best

    @property
    def best_chunk(self) -> ScanEntry:
        """Window with the largest reduction."""
        return self.entries[self.best_index]

    @property
    def min_prediction(self) -> float:
        """Lowest prediction reached by any window."""
        return min(entry.min_prediction for entry in self.entries)


@dataclass(frozen=True)
class RimSpec:
    """Bright crescent planted along the lung boundary in a slice range."""

    slice_start: int
    slice_stop: int
    angle_start_deg: float
    angle_extent_deg: float
    thickness: float
    intensity: float

    def __post_init__(self):
        """Post-initialisation to validate geometry."""
        if self.slice_start < 0 or self.slice_stop <= self.slice_start:
            raise InvalidValueError(
                f"Invalid rim slice range [{self.slice_start}, {self.slice_stop})"
            )
        if not 0 < self.angle_extent_deg <= 360:
            raise InvalidValueError(
                f"Rim angular extent must be in (0, 360], got {self.angle_extent_deg}"
            )
        if self.thickness <= 0:
            raise InvalidValueError(f"Rim thickness must be > 0, got {self.thickness}")
        if not 0 <= self.intensity <= 1:
            raise InvalidValueError(f"Rim intensity must be in [0, 1], got {self.intensity}")


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and intensities of one synthetic volume."""

    depth: int = DEFAULT_DEPTH
    height: int = DEFAULT_HEIGHT
    width: int = DEFAULT_WIDTH
    center: tuple[float, float, float] = (
        DEFAULT_DEPTH / 2,
        DEFAULT_HEIGHT / 2,
        DEFAULT_WIDTH / 2,
    )
    semi_axes: tuple[float, float, float] = (
        DEFAULT_DEPTH * 0.35,
        DEFAULT_HEIGHT * 0.3,
        DEFAULT_WIDTH * 0.3,
    )
    interior: float = DEFAULT_INTERIOR
    background: float = DEFAULT_BACKGROUND
    noise: float = DEFAULT_NOISE
    rim: Optional[RimSpec] = None
    seed: int = 0

    def __post_init__(self):
        """Post-initialisation to validate geometry and intensities."""
        if min(self.depth, self.height, self.width) < 1:
            raise InvalidValueError(
                f"Volume dimensions must be positive, got "
                f"{(self.depth, self.height, self.width)}"
            )
        if len(self.center) != 3 or len(self.semi_axes) != 3:
            raise InvalidValueError("center and semi_axes need three components")
        if min(self.semi_axes) < 1:
            raise InvalidValueError(f"Semi-axes must be >= 1, got {self.semi_axes}")
        for name in ("interior", "background"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise InvalidValueError(f"{name} must be in [0, 1], got {value}")
        if self.noise < 0 or not math.isfinite(self.noise):
            raise InvalidValueError(f"noise must be >= 0, got {self.noise}")
        if self.rim is not None and self.rim.slice_stop > self.depth:
            raise InvalidValueError(
                f"Rim slices [{self.rim.slice_start}, {self.rim.slice_stop}) "
                f"exceed depth {self.depth}"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        """Volume shape D x H x W."""
        return (self.depth, self.height, self.width)


@dataclass
class LabeledVolume:
    """A phantom with its label and planted-feature mask."""

    volume: np.ndarray
    label: Label
    truth_mask: np.ndarray
    spec: Optional[PhantomSpec] = None

    def __post_init__(self):
        """Post-initialisation to tie the label to the mask."""
        if self.volume.shape != self.truth_mask.shape:
            raise InvalidValueError(
                f"Mask shape {self.truth_mask.shape} differs from volume "
                f"shape {self.volume.shape}"
            )
        if (self.label is Label.POSITIVE) != bool(self.truth_mask.any()):
            raise InvalidValueError(
                "Positive labels need a nonempty truth mask and negatives an empty one"
            )

    @property
    def is_positive(self) -> bool:
        """Check if the volume carries the planted feature."""
        return self.label is Label.POSITIVE


@dataclass(frozen=True)
class VolumeRecord:
    """Per-volume predictions gathered by the evaluation harness."""

    index: int
    label: Label
    input_prediction: float
    baseline_prediction: float
    cf_prediction: Optional[float]
    best_start: Optional[int]

    @property
    def reduction(self) -> float:
        """Prediction drop of the counterfactual, 0 when none was computed."""
        if self.cf_prediction is None:
            return 0.0
        return self.baseline_prediction - self.cf_prediction


@dataclass(frozen=True)
class ReductionRow:
    """Mean prediction of one group with its standard error."""

    group: str
    mean: float
    stderr: float
    n: int


@dataclass
class ReductionTable:
    """Predictions on inputs and on counterfactuals of the inputs."""

    chunk_size: int
    rows: list[ReductionRow]
    records: list[VolumeRecord] = field(default_factory=list, repr=False)

    def row(self, group: str) -> ReductionRow:
        """Return the row for a group name."""
        for row in self.rows:
            if row.group == group:
                return row
        raise KeyError(group)


@dataclass(frozen=True)
class SweepPoint:
    """Mean reduction over positives for one chunk size."""

    chunk_size: int
    mean_reduction: float
    stderr: float
    n: int


@dataclass
class SweepResult:
    """Chunk-size sweep."""

    points: list[SweepPoint]

    def __post_init__(self):
        """Post-initialisation to keep sizes strictly increasing."""
        sizes = [p.chunk_size for p in self.points]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise InvalidValueError(f"Chunk sizes must be strictly increasing: {sizes}")


@dataclass
class PredictionHistograms:
    """Normalised prediction histograms sharing one set of bin edges."""

    edges: np.ndarray
    groups: dict[str, np.ndarray]


@dataclass(frozen=True)
class LocalizationRecord:
    """Localization scores of two attributions against a planted mask."""

    index: int
    best_start: int
    latent_shift_score: float
    input_gradient_score: float
    uniform_expectation: float
