"""Shared vocabulary: frame timing, boxes, detections and predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass


class InvalidConfiguration(ValueError):
    """A configuration value is outside its allowed range."""


class InvalidInput(ValueError):
    """An argument violates an operation's precondition."""


def input_timestamp(i: int, k: float) -> float:
    """Emission time of frame ``i`` for a stream at ``k`` frames per second."""
    if not k > 0:
        raise InvalidConfiguration(f"frame rate must be positive, got {k!r}")
    if i < 0:
        raise InvalidInput(f"frame index must be non-negative, got {i}")
    return i / k


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in corner form, pixel units."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInput(f"non-finite box coordinates {vals}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    @property
    def is_valid(self) -> bool:
        return self.x_min < self.x_max and self.y_min < self.y_max

    def clamp(self, width: float, height: float) -> "BBox":
        """Clip to the image plane ``[0, width] x [0, height]``."""
        return BBox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two non-degenerate boxes."""
    if not (a.is_valid and b.is_valid):
        raise InvalidInput("iou is undefined for zero-area boxes")
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(inter / union, 1.0)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidInput(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class FramePrediction:
    """Detections produced for frame ``target_index``.

    ``created_at`` is when the detector finished; ``output_at`` is when the
    output buffer released it (equal to ``created_at`` until dispatched).
    """

    target_index: int
    detections: tuple[Detection, ...] = ()
    created_at: float = 0.0
    output_at: float = 0.0

    def __post_init__(self):
        if self.output_at < self.created_at:
            raise InvalidInput(
                f"output_at {self.output_at} precedes created_at {self.created_at}"
            )


@dataclass(frozen=True)
class SizeThresholds:
    """Area cutoffs (pixels^2) splitting boxes into small / medium / large."""

    small_max_area: float = 32.0**2
    medium_max_area: float = 96.0**2

    def __post_init__(self):
        if not 0 < self.small_max_area < self.medium_max_area:
            raise InvalidConfiguration(
                "size thresholds must satisfy 0 < small_max_area < medium_max_area"
            )


def size_class(b: BBox, th: SizeThresholds = SizeThresholds()) -> str:
    """Return ``"S"``, ``"M"`` or ``"L"``; boundary areas go to the smaller class."""
    if not b.is_valid:
        raise InvalidInput("size_class needs a non-degenerate box")
    area = b.area
    if area <= th.small_max_area:
        return "S"
    if area <= th.medium_max_area:
        return "M"
    return "L"


@dataclass(frozen=True)
class GroundTruthObject:
    track_id: int
    class_id: int
    bbox: BBox
