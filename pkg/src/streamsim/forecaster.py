"""Detector models driven by temporal cues.

A model sees an ``ObservationWindow`` holding the per-frame outputs of its
backbone at the past indices and returns one ``Forecast`` per requested
future index. Stage costs are static metadata consumed by the runtime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import BBox, Detection, InvalidInput, iou
from .kernels import (
    DEFAULT_GRID,
    CarriedBox,
    CorrVolume,
    FeatureMap,
    LinearMapParams,
    correlate,
    decode_peaks,
    neck_forward,
    rasterize,
)
from .scene import Scenario, ground_truth_detections


class ModelError(RuntimeError):
    """A detector could not produce predictions for the given inputs."""


@dataclass(frozen=True)
class StageCosts:
    """Nominal stage durations in seconds; ``corr_pair`` is per computed pair."""

    backbone: float = 0.0
    neck: float = 0.0
    head: float = 0.0
    corr_pair: float = 0.0

    def __post_init__(self):
        if min(self.backbone, self.neck, self.head, self.corr_pair) < 0:
            raise InvalidInput("stage costs must be non-negative")


@dataclass(frozen=True)
class WindowEntry:
    index: int
    detections: tuple[Detection, ...] = ()
    features: FeatureMap | None = None


@dataclass(frozen=True)
class ObservationWindow:
    entries: tuple[WindowEntry, ...]

    def __post_init__(self):
        idx = [e.index for e in self.entries]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise InvalidInput(f"window indices must be strictly increasing: {idx}")

    @classmethod
    def of(cls, pairs: Sequence[tuple[int, Sequence[Detection]]]) -> "ObservationWindow":
        return cls(tuple(WindowEntry(i, tuple(d)) for i, d in pairs))

    @property
    def indices(self) -> list[int]:
        return [e.index for e in self.entries]

    @property
    def newest(self) -> WindowEntry:
        if not self.entries:
            raise ModelError("empty observation window")
        return self.entries[-1]


@dataclass(frozen=True)
class Forecast:
    target_index: int
    detections: tuple[Detection, ...] = ()


class DetectorModel:
    name = "base"
    uses_correlation = False

    def __init__(self, stage_costs: StageCosts | None = None):
        self.stage_costs = stage_costs or StageCosts()

    def extract(self, index: int, detections: Sequence[Detection]) -> WindowEntry:
        """Backbone: turn one frame's raw detections into a buffered feature."""
        return WindowEntry(index, tuple(detections))

    def correlate_pair(self, a: WindowEntry, b: WindowEntry) -> CorrVolume:
        raise ModelError(f"{self.name} does not use correlation")

    def infer(
        self,
        window: ObservationWindow,
        future: Sequence[int],
        cached_corrs: Mapping[tuple[int, int], CorrVolume] | None = None,
    ) -> list[Forecast]:
        raise NotImplementedError


class IdentityDetector(DetectorModel):
    """Non-predictive baseline: every future frame gets the newest detections."""

    name = "identity"

    def infer(self, window, future, cached_corrs=None):
        newest = window.newest
        return [Forecast(j, newest.detections) for j in future]


def _shift(box: BBox, dx: float, dy: float) -> BBox:
    return BBox(box.x_min + dx, box.y_min + dy, box.x_max + dx, box.y_max + dy)


@dataclass
class _Track:
    obs: list[tuple[int, Detection]] = field(default_factory=list)

    def velocity(self) -> tuple[float, float]:
        if len(self.obs) < 2:
            return 0.0, 0.0
        (i0, d0), (i1, d1) = self.obs[-2], self.obs[-1]
        c0, c1 = d0.bbox.center, d1.bbox.center
        return (c1[0] - c0[0]) / (i1 - i0), (c1[1] - c0[1]) / (i1 - i0)

    def predicted_box(self, index: int) -> BBox:
        i_last, d_last = self.obs[-1]
        vx, vy = self.velocity()
        return _shift(d_last.bbox, vx * (index - i_last), vy * (index - i_last))


def _size_ratio(a: BBox, b: BBox) -> float:
    return max(a.width / b.width, b.width / a.width, a.height / b.height, b.height / a.height)


def associate(
    window: ObservationWindow,
    floor: float = 0.3,
    max_speed: float = 12.0,
    max_size_ratio: float = 1.5,
) -> list[list[tuple[int, Detection]]]:
    """Chain detections across window entries into tracks.

    Entries are processed oldest first; each track's last box is advanced by
    its current velocity estimate, then same-class pairs are matched greedily
    by descending IoU with ``floor`` as the minimum. Leftovers are then paired
    by centre distance, allowing ``max_speed`` px per frame of gap and boxes
    of similar size; this catches small fast objects whose first step has no
    overlap.
    """
    tracks: list[_Track] = []
    for entry in window.entries:
        dets = list(entry.detections)
        cands = []
        for ti, tr in enumerate(tracks):
            pb = tr.predicted_box(entry.index)
            if not pb.is_valid:
                continue
            cls_id = tr.obs[-1][1].class_id
            for di, d in enumerate(dets):
                if d.class_id != cls_id:
                    continue
                v = iou(pb, d.bbox)
                if v >= floor:
                    cands.append((-v, ti, di))
        cands.sort()
        used_t, used_d = set(), set()
        for _, ti, di in cands:
            if ti in used_t or di in used_d:
                continue
            used_t.add(ti)
            used_d.add(di)
            tracks[ti].obs.append((entry.index, dets[di]))
        near = []
        for ti, tr in enumerate(tracks):
            if ti in used_t or tr.obs[-1][0] == entry.index:
                continue
            last = tr.obs[-1][1]
            pb = tr.predicted_box(entry.index)
            gate = max_speed * (entry.index - tr.obs[-1][0])
            for di, d in enumerate(dets):
                if di in used_d or d.class_id != last.class_id:
                    continue
                if _size_ratio(last.bbox, d.bbox) > max_size_ratio:
                    continue
                dist = math.dist(pb.center, d.bbox.center)
                if dist <= gate:
                    near.append((dist, ti, di))
        near.sort()
        for _, ti, di in near:
            if ti in used_t or di in used_d:
                continue
            used_t.add(ti)
            used_d.add(di)
            tracks[ti].obs.append((entry.index, dets[di]))
        for di, d in enumerate(dets):
            if di not in used_d:
                tracks.append(_Track([(entry.index, d)]))
    return [t.obs for t in tracks]


def fit_constant_velocity(obs: Sequence[tuple[int, Detection]]) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``center = a + b * index``; returns ``(a, b)`` as 2-vectors."""
    t = np.array([i for i, _ in obs], dtype=float)
    c = np.array([d.bbox.center for _, d in obs], dtype=float)
    if len(obs) < 2 or np.ptp(t) == 0:
        return c[-1].copy(), np.zeros(2)
    tm = t.mean()
    dt = t - tm
    b = (dt[:, None] * (c - c.mean(axis=0))).sum(axis=0) / (dt @ dt)
    a = c.mean(axis=0) - b * tm
    return a, b


class CVForecaster(DetectorModel):
    """Per-track least-squares constant-velocity extrapolation of box centers."""

    name = "cv"

    def __init__(
        self,
        stage_costs=None,
        image_size=None,
        association_floor: float = 0.3,
        max_speed: float = 12.0,
    ):
        super().__init__(stage_costs)
        self.image_size = image_size
        self.association_floor = association_floor
        self.max_speed = max_speed

    def infer(self, window, future, cached_corrs=None):
        newest = window.newest
        fits = []
        for obs in associate(window, self.association_floor, self.max_speed):
            i_last, d_last = obs[-1]
            if i_last != newest.index:
                continue
            fits.append((fit_constant_velocity(obs), d_last))
        out = []
        for j in future:
            dets = []
            for (a, b), d_last in fits:
                cx, cy = a + b * j
                w, h = d_last.bbox.width, d_last.bbox.height
                if self.image_size is not None:
                    W, H = self.image_size
                    cx = min(max(cx, w / 2), W - w / 2)
                    cy = min(max(cy, h / 2), H - h / 2)
                    box = BBox.from_center(cx, cy, w, h).clamp(W, H)
                else:
                    box = BBox.from_center(cx, cy, w, h)
                if box.is_valid:
                    dets.append(Detection(box, d_last.class_id, d_last.confidence))
            out.append(Forecast(j, tuple(dets)))
        return out


class KernelDetector(DetectorModel):
    """Rasterize -> correlate -> fuse -> diff -> combine -> decode peaks."""

    name = "kernel"
    uses_correlation = True

    def __init__(
        self,
        stage_costs=None,
        image_size=(1920, 1200),
        num_classes: int = 3,
        grid_hw=DEFAULT_GRID,
        r1: int = 3,
        r2: int = 1,
        params: LinearMapParams | None = None,
        threshold: float = 0.25,
        seed: int = 0,
    ):
        super().__init__(stage_costs)
        self.image_size = tuple(image_size)
        self.grid = (1 + num_classes, *grid_hw)
        self.r1, self.r2 = r1, r2
        self.params = params or LinearMapParams.seeded(self.grid[0], r1, seed)
        self.threshold = threshold
        self.computed_pairs: list[tuple[int, int]] = []

    def _features(self, e: WindowEntry) -> FeatureMap:
        if e.features is not None:
            return e.features
        return rasterize(e.detections, self.grid, self.image_size, e.index)

    def extract(self, index, detections):
        dets = tuple(detections)
        return WindowEntry(index, dets, rasterize(dets, self.grid, self.image_size, index))

    def correlate_pair(self, a, b):
        return correlate(self._features(a), self._features(b), self.r1, self.r2)

    def infer(self, window, future, cached_corrs=None):
        newest = window.newest
        cache = dict(cached_corrs or {})
        entries = window.entries
        for a, b in zip(entries, entries[1:]):
            if (a.index, b.index) not in cache:
                cache[(a.index, b.index)] = self.correlate_pair(a, b)
                self.computed_pairs.append((a.index, b.index))
        maps = [self._features(e) for e in entries]
        outs = neck_forward(maps, window.indices, list(future), newest.index, self.params, cache)
        carried = [
            CarriedBox(d.bbox.center, (d.bbox.width, d.bbox.height), d.class_id)
            for d in newest.detections
        ]
        return [
            Forecast(f.frame_index, tuple(decode_peaks(f, self.threshold, carried, self.image_size)))
            for f in outs
        ]


class OracleDetector(DetectorModel):
    """Emits exact ground truth for every requested index (test harness only)."""

    name = "oracle"

    def __init__(self, scenario: Scenario, stage_costs=None):
        super().__init__(stage_costs)
        self.scenario = scenario

    def infer(self, window, future, cached_corrs=None):
        window.newest
        return [Forecast(j, tuple(ground_truth_detections(self.scenario, j))) for j in future]


DETECTORS = {
    "identity": IdentityDetector,
    "cv": CVForecaster,
    "kernel": KernelDetector,
    "oracle": OracleDetector,
}


def make_detector(
    name: str,
    scenario: Scenario,
    stage_costs: StageCosts | None = None,
    num_classes: int | None = None,
    **options,
) -> DetectorModel:
    """Build a detector by registry name, wiring scenario geometry where needed."""
    if name == "identity":
        return IdentityDetector(stage_costs)
    if name == "cv":
        return CVForecaster(stage_costs, image_size=scenario.image_size, **options)
    if name == "kernel":
        if num_classes is None:
            num_classes = 1 + max((t.class_id for t in scenario.tracks), default=0)
        return KernelDetector(
            stage_costs, image_size=scenario.image_size, num_classes=num_classes, **options
        )
    if name == "oracle":
        return OracleDetector(scenario, stage_costs)
    raise InvalidInput(f"unknown detector {name!r}; choose from {sorted(DETECTORS)}")
